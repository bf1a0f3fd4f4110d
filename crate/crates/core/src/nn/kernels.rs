//! Dense numeric kernels behind the tape operations.

use crate::error::{Error, Result};

/// `c = a * b + beta * c` for an `m x k` by `k x n` product. Strides are
/// `(row, col)` in elements, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|v| *v *= beta);
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, a_strides) < a.len(), "gemm lhs out of bounds");
    assert!(last(k, n, b_strides) < b.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(v))` without overflow.
#[inline]
pub(crate) fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

/// Geometry of one `conv2d` call on `H x W x C_in` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[h, wd, cin], &[k, k2, cin2, cout]) = (x, w) else {
            return Err(Error::Shape(format!(
                "conv2d expects H x W x C input and k x k x C_in x C_out kernel, got {x:?} and {w:?}"
            )));
        };
        if k != k2 || cin != cin2 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel {w:?} incompatible with input {x:?} (stride {stride})"
            )));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Self {
            h,
            w: wd,
            cin,
            k,
            cout,
            stride,
            pad,
            hout: (h + 2 * pad - k) / stride + 1,
            wout: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn positions(&self) -> usize {
        self.hout * self.wout
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(output position, patch offset, input offset) for every in-bounds tap
        let (k, cin) = (self.k, self.cin);
        for oy in 0..self.hout {
            for ox in 0..self.wout {
                let pos = oy * self.wout + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(pos, (ky * k + kx) * cin, (iy as usize * self.w + ix as usize) * cin);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let cin = self.cin;
        let mut cols = vec![0.0; self.positions() * patch];
        self.for_each_tap(|pos, po, io| {
            cols[pos * patch + po..pos * patch + po + cin].copy_from_slice(&x[io..io + cin]);
        });
        cols
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (p, patch, cout) = (g.positions(), g.patch(), g.cout);
    let mut out = Vec::with_capacity(p * cout);
    for _ in 0..p {
        out.extend_from_slice(b);
    }
    if g.is_pointwise() {
        gemm(p, patch, cout, x, (patch, 1), w, (cout, 1), &mut out, 1.0);
    } else {
        let cols = g.im2col(x);
        gemm(p, patch, cout, &cols, (patch, 1), w, (cout, 1), &mut out, 1.0);
    }
    out
}

pub(crate) fn conv2d_grad_weight(g: &ConvGeom, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (p, patch, cout) = (g.positions(), g.patch(), g.cout);
    let mut dw = vec![0.0; patch * cout];
    if g.is_pointwise() {
        gemm(patch, p, cout, x, (1, patch), grad_out, (cout, 1), &mut dw, 0.0);
    } else {
        let cols = g.im2col(x);
        gemm(patch, p, cout, &cols, (1, patch), grad_out, (cout, 1), &mut dw, 0.0);
    }
    dw
}

pub(crate) fn conv2d_grad_input(g: &ConvGeom, w: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (p, patch, cout) = (g.positions(), g.patch(), g.cout);
    let mut dcols = vec![0.0; p * patch];
    gemm(p, cout, patch, grad_out, (cout, 1), w, (1, cout), &mut dcols, 0.0);
    if g.is_pointwise() {
        return dcols;
    }
    let cin = g.cin;
    let mut dx = vec![0.0; g.h * g.w * cin];
    g.for_each_tap(|pos, po, io| {
        let src = &dcols[pos * patch + po..pos * patch + po + cin];
        for (d, s) in dx[io..io + cin].iter_mut().zip(src) {
            *d += s;
        }
    });
    dx
}

/// Cosine similarity with epsilon-guarded norms and its gradients.
pub(crate) fn cosine_with_grads(a: &[f64], b: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na_raw = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb_raw = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (na_raw.max(eps), nb_raw.max(eps));
    let cos = dot / (na * nb);
    let grad = |own: &[f64], other: &[f64], n_raw: f64| -> Vec<f64> {
        // the norm term only contributes where the norm exceeds eps
        let self_term = if n_raw > eps { cos / (n_raw * n_raw) } else { 0.0 };
        own.iter()
            .zip(other)
            .map(|(o, t)| t / (na * nb) - self_term * o)
            .collect()
    };
    let ga = grad(a, b, na_raw);
    let gb = grad(b, a, nb_raw);
    (cos, ga, gb)
}
