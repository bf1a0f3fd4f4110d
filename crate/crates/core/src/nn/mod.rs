//! Minimal dense tensor engine with tape-based reverse-mode
//! differentiation, the layers used by the pillar encoder and the detector,
//! Adam, a cosine learning-rate schedule and finite-difference checking.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use graph::{Activation, BufferUpdate, Graph, Var};
pub use layers::{fan_in_bound, pointwise_conv, BatchNorm, Conv2d, Mode, Pointwise};
pub use optim::{cosine_lr, Adam};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
