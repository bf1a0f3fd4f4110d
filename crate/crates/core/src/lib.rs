//! Event-camera stream processing: dense hand-crafted representations, the
//! learnable pillar encoder, a small reverse-mode tensor engine and a
//! recurrent dual-memory object detector, plus COCO-style evaluation.

pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod memory;
pub mod event;
pub mod nn;
pub mod pillars;
pub mod repr;
pub mod throughput;

pub use error::{Error, Result};
