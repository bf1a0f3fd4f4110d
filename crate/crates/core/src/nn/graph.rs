//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive as it is evaluated; [`Graph::backward`]
//! walks the records in reverse and accumulates gradients into every node
//! that (transitively) depends on a gradient-requiring leaf.

use std::collections::HashMap;

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Scatter {
        rows: Var,
        winners: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: kernels::ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    Upsample2(Var),
    /// `softmax(scale * q k^T) v`; the attention matrix is kept for backward.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        attn: Vec<f64>,
    },
    /// Scalar-valued function whose input gradients were computed eagerly.
    Scalar(Vec<(Var, Vec<f64>)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics recorded by a training-mode batch norm, applied to the
/// store's running buffers by [`Graph::apply_buffer_updates`].
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub count_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<BufferUpdate>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node, so
    /// weights shared across time steps accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` (length = last extent of `x`) at every position.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).numel() != c {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Offset(x), rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let s_val = self.value(s).item()?;
        let data = self.data(x).iter().map(|v| v * s_val).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Act(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[n, m] = self.shape(x) else {
            return Err(Error::Shape(format!(
                "transpose expects a matrix, got {:?}",
                self.shape(x)
            )));
        };
        let src = self.data(x);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Channels `[start, start + width)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if start + width > c || width == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for last extent {c}",
                start + width
            )));
        }
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = width;
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, start, width }, rg))
    }

    /// Nearest-neighbour 2x upsampling of an `H x W x C` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let &[h, w, c] = self.shape(x) else {
            return Err(Error::Shape(format!(
                "upsample expects H x W x C, got {:?}",
                self.shape(x)
            )));
        };
        let src = self.data(x);
        let mut data = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let s = ((y / 2) * w + xx / 2) * c;
                let d = (y * 2 * w + xx) * c;
                data[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let t = Tensor::new(&[2 * h, 2 * w, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2(x), rg))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[n, k], &[k2, m]) = (sa, sb) else {
            return Err(shape_err("matmul", sa, sb));
        };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(
            n,
            k,
            m,
            self.data(a),
            (k, 1),
            self.data(b),
            (m, 1),
            &mut out,
            0.0,
        );
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of an `H x W x C_in` map with a `k x k x C_in x C_out`
    /// kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = kernels::ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.value(b).numel() != geom.cout {
            return Err(shape_err("conv2d bias", self.shape(w), self.shape(b)));
        }
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let t = Tensor::new(&[geom.hout, geom.wout, geom.cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row-softmax attention `softmax(scale * q k^T) v` as one node.
    /// `q` and `k` are `n x d` and `m x d`, `v` is `m x c`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (&[n, d], &[m, d2], &[m2, c]) = (self.shape(q), self.shape(k), self.shape(v)) else {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        };
        if d != d2 || m != m2 {
            return Err(shape_err("attention", self.shape(k), self.shape(v)));
        }
        if !(scale > 0.0) {
            return Err(Error::Value(format!("attention scale must be positive, got {scale}")));
        }
        let mut attn = vec![0.0; n * m];
        kernels::gemm(n, d, m, self.data(q), (d, 1), self.data(k), (1, d), &mut attn, 0.0);
        for row in attn.chunks_mut(m.max(1)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * scale;
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - max).exp();
                total += *x;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let mut out = vec![0.0; n * c];
        kernels::gemm(n, m, c, &attn, (m, 1), self.data(v), (c, 1), &mut out, 0.0);
        let t = Tensor::new(&[n, c], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::Attention { q, k, v, scale, attn }, rg))
    }

    /// Stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Maximum along `axis` (removed from the shape) and the winning index
    /// per output element. Ties resolve to the lowest index.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if len == 0 {
            return Err(Error::Value(format!(
                "cannot max-reduce empty axis {axis} of {shape:?}"
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        let mut source = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[o * len * inner + i];
                for j in 1..len {
                    let v = src[(o * len + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                data.push(best_v);
                arg.push(best);
                source.push((o * len + best) * inner + i);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        let v = self.push(t, Op::MaxReduce { x, argmax: source }, rg);
        Ok((v, arg))
    }

    /// Column-wise maximum over contiguous row segments of an `N x C`
    /// matrix; `offsets` has one more entry than there are segments. Empty
    /// segments produce zero rows.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let &[n, c] = self.shape(x) else {
            return Err(Error::Shape(format!(
                "segment_max expects N x C, got {:?}",
                self.shape(x)
            )));
        };
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&n)
            || offsets.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Shape(format!(
                "segment offsets must rise from 0 to {n}"
            )));
        }
        let segments = offsets.len() - 1;
        let src = self.data(x);
        let mut data = vec![0.0; segments * c];
        let mut argmax = vec![usize::MAX; segments * c];
        for s in 0..segments {
            for r in offsets[s]..offsets[s + 1] {
                for j in 0..c {
                    let o = s * c + j;
                    let v = src[r * c + j];
                    if argmax[o] == usize::MAX || v > data[o] {
                        data[o] = v;
                        argmax[o] = r * c + j;
                    }
                }
            }
        }
        let t = Tensor::new(&[segments, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SegmentMax { x, argmax }, rg))
    }

    /// Writes row `k` of `rows` (`P x C`) to cell `targets[k]` of a
    /// `height x width x C` map. Rows sharing a cell combine by elementwise
    /// maximum; untouched cells are zero.
    pub fn scatter_max(
        &mut self,
        rows: Var,
        targets: &[usize],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let &[p, c] = self.shape(rows) else {
            return Err(Error::Shape(format!(
                "scatter expects P x C rows, got {:?}",
                self.shape(rows)
            )));
        };
        if targets.len() != p {
            return Err(Error::Shape(format!(
                "{} scatter targets for {p} rows",
                targets.len()
            )));
        }
        let src = self.data(rows);
        let mut data = vec![0.0; height * width * c];
        let mut winners = vec![usize::MAX; height * width * c];
        for (k, &cell) in targets.iter().enumerate() {
            if cell >= height * width {
                return Err(Error::Shape(format!(
                    "scatter target {cell} outside {height}x{width} map"
                )));
            }
            for j in 0..c {
                let o = cell * c + j;
                let v = src[k * c + j];
                if winners[o] == usize::MAX || v > data[o] {
                    data[o] = v;
                    winners[o] = k * c + j;
                }
            }
        }
        let t = Tensor::new(&[height, width, c], data)?;
        let rg = self.rg(rows);
        Ok(self.push(t, Op::Scatter { rows, winners }, rg))
    }

    // ---- normalization --------------------------------------------------

    /// Batch normalization over every axis but the last. With `batch_stats`
    /// the statistics come from `x` and are returned; otherwise
    /// `running = (mean, var)` is used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Shape("batchnorm of a 0-d tensor".into()))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("batchnorm affine", &shape, self.shape(gamma)));
        }
        let src = self.data(x);
        let n = src.len() / c.max(1);
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape("running statistics length mismatch".into()));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if n == 0 {
                    return Err(Error::Shape("batchnorm over an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                for row in src.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in src.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    pub(crate) fn queue_buffer_update(&mut self, update: BufferUpdate) {
        self.buffer_updates.push(update);
    }

    /// Folds queued batch statistics into the running buffers, in the order
    /// they were recorded.
    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore) {
        for u in self.buffer_updates.drain(..) {
            let m = u.momentum;
            for (r, b) in store.value_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in store.value_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
            store.value_mut(u.count_id).data_mut()[0] += 1.0;
        }
    }

    // ---- fused scalar functions ----------------------------------------

    /// Records a scalar whose gradients with respect to `inputs` are already
    /// known.
    pub(crate) fn scalar_fn(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Var {
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Scalar(inputs), rg)
    }

    /// `a . b / (max(|a|, eps) * max(|b|, eps))` over flattened tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(shape_err("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let (value, ga, gb) = kernels::cosine_with_grads(self.data(a), self.data(b), eps);
        Ok(self.scalar_fn(value, vec![(a, ga), (b, gb)]))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse accumulation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_slice(&mut self, v: Var, g: &[f64]) {
        self.acc(v, |dst| {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // ops are moved out temporarily so saved data can be borrowed
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_slice(*a, g);
                self.acc_slice(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_slice(*a, g);
                self.acc(*b, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let gb: Vec<f64> = g.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    self.acc_slice(a, &gb);
                }
                if self.rg(b) {
                    let ga: Vec<f64> = g.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    self.acc_slice(b, &ga);
                }
            }
            Op::AddBias(x, bias) => {
                self.acc_slice(*x, g);
                let c = self.value(*bias).numel();
                self.acc(*bias, |d| {
                    for row in g.chunks(c) {
                        for (dd, s) in d.iter_mut().zip(row) {
                            *dd += s;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
            }
            Op::Offset(x) => self.acc_slice(*x, g),
            Op::ScaleBy(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.data(s)[0];
                self.acc(x, |d| d.iter_mut().zip(g).for_each(|(d, gg)| *d += sv * gg));
                if self.rg(s) {
                    let ds: f64 = g.iter().zip(self.data(x)).map(|(a, b)| a * b).sum();
                    self.acc(s, |d| d[0] += ds);
                }
            }
            Op::Act(x, kind) => {
                let out = self.nodes[i].value.data();
                let local: Vec<f64> = match kind {
                    Activation::Relu => out
                        .iter()
                        .zip(g)
                        .map(|(&y, &gg)| if y > 0.0 { gg } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => out.iter().zip(g).map(|(&y, &gg)| gg * y * (1.0 - y)).collect(),
                    Activation::Tanh => out.iter().zip(g).map(|(&y, &gg)| gg * (1.0 - y * y)).collect(),
                };
                self.acc_slice(*x, &local);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.rg(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g, (m, 1), self.data(b), (1, m), &mut da, 0.0);
                    self.acc_slice(a, &da);
                }
                if self.rg(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    kernels::gemm(k, n, m, self.data(a), (1, k), g, (m, 1), &mut db, 0.0);
                    self.acc_slice(b, &db);
                }
            }
            Op::Attention { q, k, v, scale, attn } => {
                let (q, k, v, scale) = (*q, *k, *v, *scale);
                let (n, d) = (self.shape(q)[0], self.shape(q)[1]);
                let (m, c) = (self.shape(v)[0], self.shape(v)[1]);
                if self.rg(v) {
                    // dV = A^T G
                    let mut dv = vec![0.0; m * c];
                    kernels::gemm(m, n, c, attn, (1, m), g, (c, 1), &mut dv, 0.0);
                    self.acc_slice(v, &dv);
                }
                if self.rg(q) || self.rg(k) {
                    // dA = G V^T, then through the row softmax and the scale
                    let mut ds = vec![0.0; n * m];
                    kernels::gemm(n, c, m, g, (c, 1), self.data(v), (1, c), &mut ds, 0.0);
                    for (drow, arow) in ds.chunks_mut(m.max(1)).zip(attn.chunks(m.max(1))) {
                        let dot: f64 = drow.iter().zip(arow).map(|(a, b)| a * b).sum();
                        for (dx, &a) in drow.iter_mut().zip(arow) {
                            *dx = scale * a * (*dx - dot);
                        }
                    }
                    if self.rg(q) {
                        let mut dq = vec![0.0; n * d];
                        kernels::gemm(n, m, d, &ds, (m, 1), self.data(k), (d, 1), &mut dq, 0.0);
                        self.acc_slice(q, &dq);
                    }
                    if self.rg(k) {
                        let mut dk = vec![0.0; m * d];
                        kernels::gemm(m, n, d, &ds, (1, m), self.data(q), (d, 1), &mut dk, 0.0);
                        self.acc_slice(k, &dk);
                    }
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(*x, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_slice(*x, g),
            Op::Sum(x) => {
                let gv = g[0];
                self.acc(*x, |d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.acc_slice(*x, &dx);
            }
            Op::MaxReduce { x, argmax } => {
                self.acc(*x, |d| {
                    for (&src, &gg) in argmax.iter().zip(g) {
                        d[src] += gg;
                    }
                });
            }
            Op::SegmentMax { x, argmax } | Op::Scatter { rows: x, winners: argmax } => {
                self.acc(*x, |d| {
                    for (&src, &gg) in argmax.iter().zip(g) {
                        if src != usize::MAX {
                            d[src] += gg;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                if self.rg(b) {
                    let c = geom.cout;
                    self.acc(b, |d| {
                        for row in g.chunks(c) {
                            for (dd, s) in d.iter_mut().zip(row) {
                                *dd += s;
                            }
                        }
                    });
                }
                if self.rg(w) {
                    let dw = kernels::conv2d_grad_weight(geom, self.data(x), g);
                    self.acc_slice(w, &dw);
                }
                if self.rg(x) {
                    let dx = kernels::conv2d_grad_input(geom, self.data(w), g);
                    self.acc_slice(x, &dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = inv_std.len();
                let n = xhat.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.rg(x) {
                    let gam = self.data(gamma).to_vec();
                    let mut dx = vec![0.0; g.len()];
                    if *batch_stats {
                        let nf = n as f64;
                        for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            for j in 0..c {
                                dx[r * c + j] = gam[j] * inv_std[j] / nf
                                    * (nf * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (r, grow) in g.chunks(c).enumerate() {
                            for j in 0..c {
                                dx[r * c + j] = gam[j] * inv_std[j] * grow[j];
                            }
                        }
                    }
                    self.acc_slice(x, &dx);
                }
                self.acc_slice(gamma, &dgamma);
                self.acc_slice(beta, &dbeta);
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    self.acc(v, |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start, width } => {
                let c = *self.shape(*x).last().expect("non-empty shape");
                let (start, width) = (*start, *width);
                self.acc(*x, |d| {
                    for (r, grow) in g.chunks(width).enumerate() {
                        for j in 0..width {
                            d[r * c + start + j] += grow[j];
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (h, w, c) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                self.acc(*x, |d| {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((y / 2) * w + xx / 2) * c;
                            let o = (y * 2 * w + xx) * c;
                            for j in 0..c {
                                d[s + j] += g[o + j];
                            }
                        }
                    }
                });
            }
            Op::Scalar(inputs) => {
                let gv = g[0];
                for (v, local) in inputs {
                    self.acc(*v, |d| {
                        for (dd, l) in d.iter_mut().zip(local) {
                            *dd += gv * l;
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient of the last `backward` loss with respect to `v`; `None`
    /// when `v` does not influence the loss or tracks no gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => Tensor::new(self.shape(v), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    /// Adds the gradient of every bound trainable parameter into `grads`.
    /// Parameters the loss does not reach receive an explicit zero.
    pub fn collect_param_grads(&self, store: &ParamStore, grads: &mut Gradients) {
        let mut bound: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if !store.get(id).trainable {
                continue;
            }
            match self.grad(v) {
                Some(g) => grads.accumulate(id, g),
                None => grads.accumulate(id, &vec![0.0; self.value(v).numel()]),
            }
        }
    }
}
