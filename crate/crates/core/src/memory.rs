//! Short- and long-range temporal memory.
//!
//! The short-range module attends from the current feature map to the
//! previous window's map (`F + softmax(q k^T / sqrt(d)) v`). The long-range
//! module is a ConvLSTM whose carried hidden and cell state are scaled by a
//! similarity weight between embeddings of the previous and current input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, ParamStore, Pointwise, Tensor, Var};

/// Channel reduction used when none is given.
pub const DEFAULT_REDUCTION: usize = 8;

const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct SrmParams {
    pub theta: Pointwise,
    pub phi: Pointwise,
    pub psi: Pointwise,
    pub channels: usize,
    pub reduction: usize,
}

impl SrmParams {
    /// `psi` starts at zero, so a fresh module is the identity.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SRM `{name}`: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let inner = channels / reduction;
        Ok(Self {
            theta: Pointwise::new(store, &format!("{name}.theta"), channels, inner, rng)?,
            phi: Pointwise::new(store, &format!("{name}.phi"), channels, inner, rng)?,
            psi: Pointwise::zeroed(store, &format!("{name}.psi"), channels, channels)?,
            channels,
            reduction,
        })
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> SrmVars {
        SrmVars {
            theta: (g.param(store, self.theta.weight), g.param(store, self.theta.bias)),
            phi: (g.param(store, self.phi.weight), g.param(store, self.phi.bias)),
            psi: (g.param(store, self.psi.weight), g.param(store, self.psi.bias)),
        }
    }
}

/// Graph variables of one SRM block: `(weight, bias)` per transform.
#[derive(Debug, Clone, Copy)]
pub struct SrmVars {
    pub theta: (Var, Var),
    pub phi: (Var, Var),
    pub psi: (Var, Var),
}

fn hw_c(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(v) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("expected an H x W x C map, got {s:?}"))),
    }
}

/// Row-softmaxed attention `(hw) x (hw)` from `current` to `previous`.
pub fn attention_map(g: &mut Graph, current: Var, previous: Var, v: &SrmVars) -> Result<Var> {
    let (h, w, _) = hw_c(g, current)?;
    if g.shape(current) != g.shape(previous) {
        return Err(Error::Shape(format!(
            "SRM maps differ between windows: {:?} vs {:?}",
            g.shape(current),
            g.shape(previous)
        )));
    }
    let q = crate::nn::pointwise_conv(g, current, v.theta.0, v.theta.1)?;
    let k = crate::nn::pointwise_conv(g, previous, v.phi.0, v.phi.1)?;
    let d = g.shape(q)[2];
    let q = g.reshape(q, &[h * w, d])?;
    let k = g.reshape(k, &[h * w, d])?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    g.softmax(s, 1)
}

pub fn srm_forward_with(g: &mut Graph, current: Var, previous: Var, v: &SrmVars) -> Result<Var> {
    let (h, w, c) = hw_c(g, current)?;
    if g.shape(current) != g.shape(previous) {
        return Err(Error::Shape(format!(
            "SRM maps differ between windows: {:?} vs {:?}",
            g.shape(current),
            g.shape(previous)
        )));
    }
    let q = crate::nn::pointwise_conv(g, current, v.theta.0, v.theta.1)?;
    let k = crate::nn::pointwise_conv(g, previous, v.phi.0, v.phi.1)?;
    let d = g.shape(q)[2];
    let q = g.reshape(q, &[h * w, d])?;
    let k = g.reshape(k, &[h * w, d])?;
    let val = crate::nn::pointwise_conv(g, previous, v.psi.0, v.psi.1)?;
    let val = g.reshape(val, &[h * w, c])?;
    // same as attention_map followed by a matmul, in one node
    let agg = g.attention(q, k, val, 1.0 / (d as f64).sqrt())?;
    let agg = g.reshape(agg, &[h, w, c])?;
    g.add(current, agg)
}

pub fn srm_forward(
    g: &mut Graph,
    store: &ParamStore,
    current: Var,
    previous: Var,
    params: &SrmParams,
) -> Result<Var> {
    let v = params.bind(g, store);
    srm_forward_with(g, current, previous, &v)
}

/// Hidden and cell maps carried between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct LrmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LrmState {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            h: Tensor::zeros(&[height, width, channels]),
            c: Tensor::zeros(&[height, width, channels]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.c.is_finite()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConvLstmParams {
    /// 3x3 conv over `[x, h]` producing the `i, f, o, g` pre-activations.
    pub gates: Conv2d,
    /// 3x3 embedding shared by the previous and current input.
    pub embed: Conv2d,
    pub input_channels: usize,
    pub hidden: usize,
}

impl AdaptiveConvLstmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gates = Conv2d::new(store, &format!("{name}.gates"), input_channels + hidden, 4 * hidden, 3, 1, rng)?;
        // forget gate starts open
        store.value_mut(gates.bias).data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(Self {
            gates,
            embed: Conv2d::new(store, &format!("{name}.embed"), input_channels, input_channels, 3, 1, rng)?,
            input_channels,
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> LstmVars {
        LstmVars {
            gate_w: g.param(store, self.gates.weight),
            gate_b: g.param(store, self.gates.bias),
            emb_w: g.param(store, self.embed.weight),
            emb_b: g.param(store, self.embed.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub gate_w: Var,
    pub gate_b: Var,
    pub emb_w: Var,
    pub emb_b: Var,
}

/// Outputs of one recurrent step.
#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    /// One-element adaptive weight in `[0, 1]`.
    pub weight: Var,
}

/// `w = (cos(emb(prev_input), emb(x)) + 1) / 2`.
pub fn adaptive_weight(g: &mut Graph, x: Var, prev_input: Var, v: &LstmVars) -> Result<Var> {
    let e_prev = g.conv2d(prev_input, v.emb_w, v.emb_b, 1, 1)?;
    let e_cur = g.conv2d(x, v.emb_w, v.emb_b, 1, 1)?;
    let cos = g.cosine_similarity(e_prev, e_cur, COSINE_EPS)?;
    let shifted = g.add_scalar(cos, 1.0);
    Ok(g.scale(shifted, 0.5))
}

/// Plain ConvLSTM update on an already scaled state.
pub fn convlstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, gate_w: Var, gate_b: Var) -> Result<(Var, Var)> {
    let hidden = *g.shape(h).last().unwrap_or(&0);
    if g.shape(h) != g.shape(c) || g.shape(h)[..2] != g.shape(x)[..2] {
        return Err(Error::Shape(format!(
            "ConvLSTM state {:?}/{:?} does not fit input {:?}",
            g.shape(h),
            g.shape(c),
            g.shape(x)
        )));
    }
    let xh = g.concat_last(&[x, h])?;
    let z = g.conv2d(xh, gate_w, gate_b, 1, 1)?;
    let zi = g.slice_last(z, 0, hidden)?;
    let zf = g.slice_last(z, hidden, hidden)?;
    let zo = g.slice_last(z, 2 * hidden, hidden)?;
    let zg = g.slice_last(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

pub fn adaptive_convlstm_step_with(
    g: &mut Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    prev_input: Var,
    v: &LstmVars,
) -> Result<LstmStep> {
    if g.shape(prev_input) != g.shape(x) {
        return Err(Error::Shape(format!(
            "previous input {:?} does not match current input {:?}",
            g.shape(prev_input),
            g.shape(x)
        )));
    }
    let w = adaptive_weight(g, x, prev_input, v)?;
    let h_s = g.scale_by(h_prev, w)?;
    let c_s = g.scale_by(c_prev, w)?;
    let (h, c) = convlstm_cell(g, x, h_s, c_s, v.gate_w, v.gate_b)?;
    Ok(LstmStep { h, c, weight: w })
}

pub fn adaptive_convlstm_step(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    prev_input: Var,
    params: &AdaptiveConvLstmParams,
) -> Result<LstmStep> {
    let v = params.bind(g, store);
    adaptive_convlstm_step_with(g, x, h_prev, c_prev, prev_input, &v)
}

/// Per-scale recurrent state as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct ScaleMemory {
    pub h: Var,
    pub c: Var,
    pub prev_input: Var,
}

/// Applies one adaptive ConvLSTM per scale. Returns the new hidden maps,
/// which double as the enhanced features, and the step records.
pub fn lrm_forward(
    g: &mut Graph,
    store: &ParamStore,
    features: &[Var],
    memory: &[ScaleMemory],
    params: &[AdaptiveConvLstmParams],
) -> Result<Vec<LstmStep>> {
    if features.len() != memory.len() || features.len() != params.len() {
        return Err(Error::Config(format!(
            "LRM got {} feature scales, {} states and {} parameter sets",
            features.len(),
            memory.len(),
            params.len()
        )));
    }
    features
        .iter()
        .zip(memory)
        .zip(params)
        .map(|((&x, m), p)| adaptive_convlstm_step(g, store, x, m.h, m.c, m.prev_input, p))
        .collect()
}

/// State snapshot entries named `lrm.scale<i>.h` / `.c`, in checkpoint form.
pub fn encode_states(states: &[LrmState]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(2 * states.len());
    for (i, s) in states.iter().enumerate() {
        entries.push((format!("lrm.scale{i}.h"), s.h.clone()));
        entries.push((format!("lrm.scale{i}.c"), s.c.clone()));
    }
    crate::nn::checkpoint::encode(&entries)
}

pub fn decode_states(bytes: &[u8]) -> Result<Vec<LrmState>> {
    let entries = crate::nn::checkpoint::decode(bytes)?;
    if entries.len() % 2 != 0 {
        return Err(Error::Value(format!("state snapshot has {} entries, expected pairs", entries.len())));
    }
    let mut out = Vec::with_capacity(entries.len() / 2);
    for (i, pair) in entries.chunks(2).enumerate() {
        let (hn, h) = &pair[0];
        let (cn, c) = &pair[1];
        if *hn != format!("lrm.scale{i}.h") || *cn != format!("lrm.scale{i}.c") {
            return Err(Error::Value(format!("unexpected state entries `{hn}`, `{cn}` at scale {i}")));
        }
        if h.shape() != c.shape() {
            return Err(Error::Shape(format!("scale {i}: h {:?} vs c {:?}", h.shape(), c.shape())));
        }
        out.push(LrmState { h: h.clone(), c: c.clone() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Dense transcription: flatten, project, row softmax, aggregate, add.
    fn srm_oracle(cur: &Tensor, prev: &Tensor, store: &ParamStore, p: &SrmParams) -> Vec<f64> {
        let (h, w, c) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let n = h * w;
        let proj = |x: &[f64], l: &Pointwise, cout: usize| -> Vec<Vec<f64>> {
            let wt = store.value(l.weight).data();
            let b = store.value(l.bias).data();
            (0..n)
                .map(|r| (0..cout).map(|j| b[j] + (0..c).map(|i| x[r * c + i] * wt[i * cout + j]).sum::<f64>()).collect())
                .collect()
        };
        let d = c / p.reduction;
        let q = proj(cur.data(), &p.theta, d);
        let k = proj(prev.data(), &p.phi, d);
        let v = proj(prev.data(), &p.psi, c);
        let mut out = cur.data().to_vec();
        for r in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|s| (0..d).map(|j| q[r][j] * k[s][j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for s in 0..n {
                for j in 0..c {
                    out[r * c + j] += e[s] / z * v[s][j];
                }
            }
        }
        out
    }

    #[test]
    fn zero_value_branch_is_identity() {
        let mut store = ParamStore::new();
        let p = SrmParams::new(&mut store, "srm", 8, 2, &mut rng(1)).unwrap();
        let cur = Tensor::uniform(&[3, 4, 8], 2.0, &mut rng(2));
        let prev = Tensor::uniform(&[3, 4, 8], 2.0, &mut rng(3));
        let mut g = Graph::new();
        let (a, b) = (g.input(cur.clone()), g.input(prev));
        let y = srm_forward(&mut g, &store, a, b, &p).unwrap();
        assert_eq!(g.value(y), &cur);
    }

    #[test]
    fn singleton_map_attends_to_itself() {
        let mut store = ParamStore::new();
        let p = SrmParams::new(&mut store, "srm", 4, 2, &mut rng(4)).unwrap();
        let psi = Tensor::uniform(&[4, 4], 1.0, &mut rng(5));
        *store.value_mut(p.psi.weight) = psi.clone();
        let cur = Tensor::uniform(&[1, 1, 4], 1.0, &mut rng(6));
        let prev = Tensor::uniform(&[1, 1, 4], 1.0, &mut rng(7));
        let mut g = Graph::new();
        let (a, b) = (g.input(cur.clone()), g.input(prev.clone()));
        let v = p.bind(&mut g, &store);
        let att = attention_map(&mut g, a, b, &v).unwrap();
        assert_eq!(g.value(att).data(), &[1.0]);
        let y = srm_forward(&mut g, &store, a, b, &p).unwrap();
        let val = p.psi.forward(&mut g, &store, b).unwrap();
        let expected = g.add(a, val).unwrap();
        assert_eq!(g.value(y).data(), g.value(expected).data());
    }

    #[test]
    fn srm_matches_dense_oracle() {
        let mut store = ParamStore::new();
        let p = SrmParams::new(&mut store, "srm", 8, 2, &mut rng(8)).unwrap();
        *store.value_mut(p.psi.weight) = Tensor::uniform(&[8, 8], 0.5, &mut rng(9));
        *store.value_mut(p.psi.bias) = Tensor::uniform(&[8], 0.5, &mut rng(10));
        let cur = Tensor::uniform(&[3, 3, 8], 1.0, &mut rng(11));
        let prev = Tensor::uniform(&[3, 3, 8], 1.0, &mut rng(12));
        let mut g = Graph::new();
        let (a, b) = (g.input(cur.clone()), g.input(prev.clone()));
        let y = srm_forward(&mut g, &store, a, b, &p).unwrap();
        let expected = srm_oracle(&cur, &prev, &store, &p);
        for (x, e) in g.value(y).data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_at_large_magnitude() {
        let mut store = ParamStore::new();
        let p = SrmParams::new(&mut store, "srm", 8, 4, &mut rng(13)).unwrap();
        let mut g = Graph::new();
        let a = g.input(Tensor::uniform(&[4, 4, 8], 1e3, &mut rng(14)));
        let b = g.input(Tensor::uniform(&[4, 4, 8], 1e3, &mut rng(15)));
        let v = p.bind(&mut g, &store);
        let att = attention_map(&mut g, a, b, &v).unwrap();
        for row in g.value(att).data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn srm_shape_mismatch_and_bad_reduction() {
        let mut store = ParamStore::new();
        assert!(matches!(SrmParams::new(&mut store, "bad", 6, 4, &mut rng(0)), Err(Error::Config(_))));
        let p = SrmParams::new(&mut store, "srm", 4, 2, &mut rng(16)).unwrap();
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 2, 4]));
        let b = g.input(Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(srm_forward(&mut g, &store, a, b, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_parameters_zero_state_give_zero_hidden() {
        let mut store = ParamStore::new();
        let p = AdaptiveConvLstmParams::new(&mut store, "lstm", 3, 4, &mut rng(17)).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.input(Tensor::uniform(&[4, 5, 3], 1.0, &mut rng(18)));
        let h = g.input(Tensor::zeros(&[4, 5, 4]));
        let prev = g.input(Tensor::zeros(&[4, 5, 3]));
        let step = adaptive_convlstm_step(&mut g, &store, x, h, h, prev, &p).unwrap();
        assert!(g.value(step.h).data().iter().all(|&v| v == 0.0));
    }

    /// Independent ConvLSTM cell: direct convolution loops and scalar gates.
    fn reference_cell(x: &Tensor, h: &Tensor, c: &Tensor, w: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<[f64; 3]>) {
        let (hh, ww, cx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ch = h.shape()[2];
        let cin = cx + ch;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![0.0; hh * ww * ch];
        let mut c_out = vec![0.0; hh * ww * ch];
        let mut gates = Vec::new();
        for y in 0..hh {
            for xx in 0..ww {
                let mut z = b.data().to_vec();
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                            continue;
                        }
                        let pix = iy as usize * ww + ix as usize;
                        for ci in 0..cin {
                            let v = if ci < cx { x.data()[pix * cx + ci] } else { h.data()[pix * ch + ci - cx] };
                            for (co, zz) in z.iter_mut().enumerate() {
                                *zz += v * w.data()[((ky * 3 + kx) * cin + ci) * 4 * ch + co];
                            }
                        }
                    }
                }
                let pix = y * ww + xx;
                for j in 0..ch {
                    let (i, f, o, gg) = (sig(z[j]), sig(z[ch + j]), sig(z[2 * ch + j]), z[3 * ch + j].tanh());
                    gates.push([i, f, o]);
                    let cn = f * c.data()[pix * ch + j] + i * gg;
                    c_out[pix * ch + j] = cn;
                    h_out[pix * ch + j] = o * cn.tanh();
                }
            }
        }
        (h_out, c_out, gates)
    }

    #[test]
    fn identical_embeddings_reduce_to_reference_convlstm() {
        let mut store = ParamStore::new();
        let p = AdaptiveConvLstmParams::new(&mut store, "lstm", 3, 2, &mut rng(19)).unwrap();
        let mut r = rng(20);
        let x = Tensor::uniform(&[4, 3, 3], 1.0, &mut r);
        let h = Tensor::uniform(&[4, 3, 2], 1.0, &mut r);
        let c = Tensor::uniform(&[4, 3, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let (vx, vh, vc) = (g.input(x.clone()), g.input(h.clone()), g.input(c.clone()));
        let step = adaptive_convlstm_step(&mut g, &store, vx, vh, vc, vx, &p).unwrap();
        assert!((g.value(step.weight).data()[0] - 1.0).abs() < 1e-12);

        let (h_ref, c_ref, gates) = reference_cell(&x, &h, &c, store.value(p.gates.weight), store.value(p.gates.bias));
        let w = g.value(step.weight).data()[0];
        // w differs from 1 only by rounding
        let scale = |t: &Tensor| Tensor::new(t.shape(), t.data().iter().map(|v| v * w).collect()).unwrap();
        let (h_ref2, _, _) = reference_cell(&x, &scale(&h), &scale(&c), store.value(p.gates.weight), store.value(p.gates.bias));
        for ((a, b), b2) in g.value(step.h).data().iter().zip(&h_ref).zip(&h_ref2) {
            assert!((a - b).abs() < 1e-10 && (a - b2).abs() < 1e-12);
        }
        for (a, b) in g.value(step.c).data().iter().zip(&c_ref) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(gates.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn adaptive_weight_bounds() {
        let mut store = ParamStore::new();
        let p = AdaptiveConvLstmParams::new(&mut store, "lstm", 2, 2, &mut rng(21)).unwrap();
        let mut g = Graph::new();
        let v = p.bind(&mut g, &store);
        let x = g.input(Tensor::uniform(&[3, 3, 2], 1.0, &mut rng(22)));
        let neg = g.scale(x, -1.0);
        // zero bias makes the embedding linear, so negating the input negates it
        let w = adaptive_weight(&mut g, x, neg, &v).unwrap();
        assert!(g.value(w).data()[0].abs() < 1e-12);
        let mut r = rng(23);
        for _ in 0..20 {
            let a = g.input(Tensor::uniform(&[3, 3, 2], 5.0, &mut r));
            let b = g.input(Tensor::uniform(&[3, 3, 2], 5.0, &mut r));
            let w = adaptive_weight(&mut g, a, b, &v).unwrap();
            let w = g.value(w).data()[0];
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn hidden_state_bounded_and_accumulates() {
        let mut store = ParamStore::new();
        let p = AdaptiveConvLstmParams::new(&mut store, "lstm", 2, 3, &mut rng(24)).unwrap();
        let x = Tensor::uniform(&[3, 3, 2], 4.0, &mut rng(25));
        let mut g = Graph::new();
        let vx = g.input(x.clone());
        let zeros_h = g.input(Tensor::zeros(&[3, 3, 3]));
        let zeros_x = g.input(Tensor::zeros(&[3, 3, 2]));
        let s1 = adaptive_convlstm_step(&mut g, &store, vx, zeros_h, zeros_h, zeros_x, &p).unwrap();
        let s2 = adaptive_convlstm_step(&mut g, &store, vx, s1.h, s1.c, vx, &p).unwrap();
        assert_ne!(g.value(s1.h).data(), g.value(s2.h).data());
        for s in [s1, s2] {
            assert!(g.value(s.h).data().iter().all(|v| v.abs() <= 1.0));
        }
        // second step equals a plain cell on the unscaled state (w = 1)
        let (h_ref, _, _) = reference_cell(
            &x,
            g.value(s1.h),
            g.value(s1.c),
            store.value(p.gates.weight),
            store.value(p.gates.bias),
        );
        for (a, b) in g.value(s2.h).data().iter().zip(&h_ref) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lrm_over_scales() {
        let mut store = ParamStore::new();
        let mut r = rng(26);
        let params: Vec<_> = (0..3)
            .map(|i| AdaptiveConvLstmParams::new(&mut store, &format!("lrm{i}"), 2, 2, &mut r).unwrap())
            .collect();
        zero_all(&mut store);
        let mut g = Graph::new();
        let mut feats = Vec::new();
        let mut mem = Vec::new();
        for s in [8, 4, 2] {
            let z = g.input(Tensor::zeros(&[s, s, 2]));
            feats.push(z);
            mem.push(ScaleMemory { h: z, c: z, prev_input: z });
        }
        let out = lrm_forward(&mut g, &store, &feats, &mem, &params).unwrap();
        assert!(out.iter().all(|s| g.value(s.h).data().iter().all(|&v| v == 0.0)));
        assert!(matches!(lrm_forward(&mut g, &store, &feats[..2], &mem, &params), Err(Error::Config(_))));
    }

    #[test]
    fn srm_gradcheck() {
        let mut r = rng(27);
        let inputs = [
            Tensor::uniform(&[2, 3, 4], 1.0, &mut r),
            Tensor::uniform(&[2, 3, 4], 1.0, &mut r),
            Tensor::uniform(&[4, 2], 1.0, &mut r),
            Tensor::uniform(&[2], 1.0, &mut r),
            Tensor::uniform(&[4, 2], 1.0, &mut r),
            Tensor::uniform(&[4, 4], 1.0, &mut r),
            Tensor::uniform(&[4], 1.0, &mut r),
        ];
        // the key bias shifts every logit of a row equally, so its gradient
        // is identically zero and it is held constant here
        let phi_bias = Tensor::uniform(&[2], 1.0, &mut r);
        let mix = Tensor::uniform(&[2, 3, 4], 1.0, &mut r);
        let report = gradcheck(
            |g, v| {
                let pb = g.input(phi_bias.clone());
                let vars = SrmVars { theta: (v[2], v[3]), phi: (v[4], pb), psi: (v[5], v[6]) };
                let y = srm_forward_with(g, v[0], v[1], &vars)?;
                let m = g.input(mix.clone());
                let y = g.mul(y, m)?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn lstm_step_gradcheck() {
        let mut r = rng(28);
        let inputs = [
            Tensor::uniform(&[3, 3, 2], 1.0, &mut r),
            Tensor::uniform(&[3, 3, 2], 0.8, &mut r),
            Tensor::uniform(&[3, 3, 2], 0.8, &mut r),
            Tensor::uniform(&[3, 3, 2], 1.0, &mut r),
            Tensor::uniform(&[3, 3, 4, 8], 0.5, &mut r),
            Tensor::uniform(&[8], 0.5, &mut r),
            Tensor::uniform(&[3, 3, 2, 2], 0.5, &mut r),
            Tensor::uniform(&[2], 0.5, &mut r),
        ];
        let mix = Tensor::uniform(&[3, 3, 2], 1.0, &mut r);
        let report = gradcheck(
            |g, v| {
                let vars = LstmVars { gate_w: v[4], gate_b: v[5], emb_w: v[6], emb_b: v[7] };
                let s = adaptive_convlstm_step_with(g, v[0], v[1], v[2], v[3], &vars)?;
                let hc = g.add(s.h, s.c)?;
                let m = g.input(mix.clone());
                let y = g.mul(hc, m)?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn state_snapshot_round_trip() {
        let mut r = rng(29);
        let states = vec![
            LrmState { h: Tensor::uniform(&[4, 4, 2], 1.0, &mut r), c: Tensor::uniform(&[4, 4, 2], 1.0, &mut r) },
            LrmState::zeros(2, 2, 3),
        ];
        let bytes = encode_states(&states);
        assert_eq!(decode_states(&bytes).unwrap(), states);
    }
}
