//! Parameterized layers. Each layer only stores [`ParamId`]s; values live in
//! a [`ParamStore`] and are bound into a [`Graph`] on every forward pass.

use rand::Rng;

use super::graph::{BufferUpdate, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fan-in scaled uniform bound (unit-variance preserving for linear maps).
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

/// Same affine map `x W + b` applied along the last axis at every position.
pub fn pointwise_conv(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let &[cin, cout] = g.shape(w) else {
        return Err(Error::Shape(format!(
            "pointwise weight must be C_in x C_out, got {:?}",
            g.shape(w)
        )));
    };
    if shape.last() != Some(&cin) {
        return Err(Error::Shape(format!(
            "pointwise conv: input {shape:?} has no trailing extent {cin}"
        )));
    }
    let rows = shape.iter().product::<usize>() / cin;
    let flat = g.reshape(x, &[rows, cin])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = cout;
    g.reshape(y, &out_shape)
}

/// 1x1 convolution / linear layer.
#[derive(Debug, Clone, Copy)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = Tensor::uniform(&[cin, cout], fan_in_bound(cin), rng);
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), w)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), Tensor::zeros(&[cin, cout]))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        pointwise_conv(g, x, w, b)
    }
}

/// Square-kernel 2D convolution over `H x W x C` maps.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// "Same" padding for odd `k`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv `{name}`: kernel size {k} must be odd")));
        }
        let w = Tensor::uniform(&[k, k, cin, cout], fan_in_bound(k * k * cin), rng);
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), w)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            pad: (k - 1) / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over all axes except the last, with running
/// statistics kept as store buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub updates: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?,
            updates: store.add_buffer(&format!("{name}.updates"), Tensor::zeros(&[1]))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update on the graph (skipped for batches smaller than 2). Eval mode
    /// requires at least one recorded update.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm(x, gamma, beta, None, self.eps)?;
                let c = *g.shape(x).last().expect("checked by batchnorm");
                let n = g.value(x).numel() / c;
                if let Some((mean, var)) = stats {
                    if n >= 2 {
                        let unbias = n as f64 / (n - 1) as f64;
                        g.queue_buffer_update(BufferUpdate {
                            mean_id: self.running_mean,
                            var_id: self.running_var,
                            count_id: self.updates,
                            batch_mean: mean,
                            batch_var: var.iter().map(|v| v * unbias).collect(),
                            momentum: self.momentum,
                        });
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                if store.value(self.updates).data()[0] == 0.0 {
                    return Err(Error::State(format!(
                        "batch norm `{}` evaluated before any running statistics were recorded",
                        store.get(self.gamma).name.trim_end_matches(".gamma")
                    )));
                }
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                let (y, _) = g.batchnorm(x, gamma, beta, Some((&mean, &var)), self.eps)?;
                Ok(y)
            }
        }
    }
}
