//! Central-difference checks of every differentiable building block, each
//! under a caller-chosen list of seeds. Shared by the `gradcheck` command
//! and the test suites.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{focal_loss, smooth_l1, ClassTarget};
use crate::encoder::polarity_image_with;
use crate::error::{Error, Result};
use crate::event::{Event, EventWindow, Polarity, SensorGeometry};
use crate::memory::{adaptive_convlstm_step_with, srm_forward_with, LstmVars, SrmVars};
use crate::nn::{gradcheck, pointwise_conv, GradcheckReport, Graph, Tensor, Var};
use crate::pillars::PillarConfig;

/// Finite-difference step.
pub const DELTA: f64 = 1e-5;

/// Names of the checked operations, in run order.
pub const OPERATIONS: [&str; 10] = [
    "pointwise_conv",
    "batchnorm",
    "conv2d",
    "softmax",
    "max_reduce",
    "srm",
    "adaptive_convlstm",
    "focal_loss",
    "smooth_l1",
    "eventpillars_forward",
];

/// Worst result of one operation over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

/// Random weighting so the scalar loss sees every output element differently.
fn weighted_sum(g: &mut Graph, y: Var, mix: &Tensor) -> Result<Var> {
    let m = g.input(mix.clone());
    let p = g.mul(y, m)?;
    Ok(g.sum(p))
}

/// Well-separated values so no max changes winner under the difference step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    vals.shuffle(rng);
    for v in &mut vals {
        *v += rng.gen_range(-0.01..0.01);
    }
    Tensor::new(shape, vals).expect("matching length")
}

fn small_window(rng: &mut ChaCha8Rng) -> EventWindow {
    let geometry = SensorGeometry::new(4, 3).expect("non-zero");
    let n = rng.gen_range(8..16);
    let mut ts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
    ts.sort_unstable();
    let events = ts
        .into_iter()
        .map(|t| {
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..4), rng.gen_range(0..3), t, p)
        })
        .collect();
    EventWindow::new(events, 0, 1000, geometry).expect("valid window")
}

/// Runs one named check with one seed.
pub fn run_check(name: &str, seed: u64) -> Result<GradcheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    match name {
        "pointwise_conv" => {
            let inputs = [uniform(&[4, 3, 5], 1.0, r), uniform(&[5, 2], 1.0, r), uniform(&[2], 1.0, r)];
            let mix = uniform(&[4, 3, 2], 1.0, r);
            gradcheck(
                |g, v| {
                    let y = pointwise_conv(g, v[0], v[1], v[2])?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "batchnorm" => {
            let inputs = [uniform(&[4, 3, 3], 1.0, r), uniform(&[3], 1.0, r), uniform(&[3], 1.0, r)];
            let mix = uniform(&[4, 3, 3], 1.0, r);
            gradcheck(
                |g, v| {
                    let (y, _) = g.batchnorm(v[0], v[1], v[2], None, 1e-5)?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let k = [1, 3, 3][(seed % 3) as usize];
            let inputs = [uniform(&[5, 6, 2], 1.0, r), uniform(&[k, k, 2, 3], 1.0, r), uniform(&[3], 1.0, r)];
            let out = |n: usize| (n + 2 * (k / 2) - k) / stride + 1;
            let mix = uniform(&[out(5), out(6), 3], 1.0, r);
            gradcheck(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, k / 2)?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "softmax" => {
            let axis = (seed % 2) as usize;
            let inputs = [uniform(&[3, 5], 2.0, r)];
            let mix = uniform(&[3, 5], 1.0, r);
            gradcheck(
                |g, v| {
                    let y = g.softmax(v[0], axis)?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "max_reduce" => {
            let axis = (seed % 3) as usize;
            let inputs = [distinct(&[3, 4, 2], r)];
            let mut out_shape = vec![3, 4, 2];
            out_shape.remove(axis);
            let mix = uniform(&out_shape, 1.0, r);
            gradcheck(
                |g, v| {
                    let (y, _) = g.max_reduce(v[0], axis)?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "srm" => {
            let (h, w, c, d) = (2, 3, 4, 2);
            let inputs = [
                uniform(&[h, w, c], 1.0, r),
                uniform(&[h, w, c], 1.0, r),
                uniform(&[c, d], 1.0, r),
                uniform(&[d], 1.0, r),
                uniform(&[c, d], 1.0, r),
                uniform(&[c, c], 1.0, r),
                uniform(&[c], 1.0, r),
            ];
            // the key bias moves a whole softmax row at once; its gradient
            // is identically zero, so it stays fixed
            let phi_bias = uniform(&[d], 1.0, r);
            let mix = uniform(&[h, w, c], 1.0, r);
            gradcheck(
                |g, v| {
                    let pb = g.input(phi_bias.clone());
                    let vars = SrmVars { theta: (v[2], v[3]), phi: (v[4], pb), psi: (v[5], v[6]) };
                    let y = srm_forward_with(g, v[0], v[1], &vars)?;
                    weighted_sum(g, y, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "adaptive_convlstm" => {
            let inputs = [
                uniform(&[3, 3, 2], 1.0, r),
                uniform(&[3, 3, 2], 0.8, r),
                uniform(&[3, 3, 2], 0.8, r),
                uniform(&[3, 3, 2], 1.0, r),
                uniform(&[3, 3, 4, 8], 0.5, r),
                uniform(&[8], 0.5, r),
                uniform(&[3, 3, 2, 2], 0.5, r),
                uniform(&[2], 0.5, r),
            ];
            let mix = uniform(&[3, 3, 2], 1.0, r);
            gradcheck(
                |g, v| {
                    let vars = LstmVars { gate_w: v[4], gate_b: v[5], emb_w: v[6], emb_b: v[7] };
                    let s = adaptive_convlstm_step_with(g, v[0], v[1], v[2], v[3], &vars)?;
                    let hc = g.add(s.h, s.c)?;
                    weighted_sum(g, hc, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        "focal_loss" => {
            let targets: Vec<ClassTarget> = (0..6)
                .map(|_| match r.gen_range(0..4) {
                    0 => ClassTarget::Ignore,
                    1 => ClassTarget::Negative,
                    _ => ClassTarget::Positive(r.gen_range(0..2)),
                })
                .collect();
            let gamma = [0.0, 1.0, 2.0][(seed % 3) as usize];
            let inputs = [uniform(&[6, 2], 3.0, r)];
            gradcheck(|g, v| focal_loss(g, v[0], &targets, gamma, 0.25), &inputs, DELTA)
        }
        "smooth_l1" => {
            let targets: Vec<[f64; 4]> = (0..5).map(|_| [0.0; 4]).collect();
            let weights: Vec<f64> = (0..5).map(|_| r.gen_range(0..3) as f64 * 0.5).collect();
            let mut x = uniform(&[5, 4], 3.0, r);
            // keep clear of the |x| = 1 kink
            for v in x.data_mut() {
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v += 0.2f64.copysign(*v);
                }
            }
            gradcheck(|g, v| smooth_l1(g, v[0], &targets, &weights), &[x], DELTA)
        }
        "eventpillars_forward" => {
            let win = small_window(r);
            let config = PillarConfig::default();
            let channels = 3;
            let mut inputs = Vec::new();
            let mut conv_bias = Vec::new();
            for _ in 0..2 {
                inputs.push(uniform(&[6, channels], 0.5, r));
                let gamma: Vec<f64> = (0..channels).map(|_| 1.0 + r.gen_range(-0.5..0.5)).collect();
                inputs.push(Tensor::new(&[channels], gamma)?);
                inputs.push(uniform(&[channels], 0.5, r));
                // batch statistics cancel the conv bias exactly, so it is
                // held fixed like any other zero-gradient parameter
                conv_bias.push(uniform(&[channels], 0.5, r));
            }
            let mix = uniform(&[3, 4, 2 * channels], 1.0, r);
            gradcheck(
                |g, v| {
                    let mut halves = Vec::with_capacity(2);
                    for (j, polarity) in [Polarity::Positive, Polarity::Negative].into_iter().enumerate() {
                        let (w, gamma, beta) = (v[3 * j], v[3 * j + 1], v[3 * j + 2]);
                        let b = g.input(conv_bias[j].clone());
                        let layer = move |g: &mut Graph, x: Var| {
                            let y = pointwise_conv(g, x, w, b)?;
                            let (y, _) = g.batchnorm(y, gamma, beta, None, 1e-5)?;
                            Ok(g.relu(y))
                        };
                        halves.push(polarity_image_with(g, &win, &config, polarity, channels, layer)?);
                    }
                    let img = g.concat_last(&halves)?;
                    weighted_sum(g, img, &mix)
                },
                &inputs,
                DELTA,
            )
        }
        other => Err(Error::Value(format!(
            "unknown gradient check `{other}`; valid names: {}",
            OPERATIONS.join(", ")
        ))),
    }
}

/// Every operation in [`OPERATIONS`] under each of `seeds`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    OPERATIONS
        .iter()
        .map(|&name| {
            let mut entry = SuiteEntry { name, seeds: 0, coordinates: 0, max_rel_err: 0.0, worst_seed: 0 };
            for &s in seeds {
                let rep = run_check(name, s)?;
                entry.seeds += 1;
                entry.coordinates += rep.coordinates;
                if rep.max_rel_err >= entry.max_rel_err {
                    entry.max_rel_err = rep.max_rel_err;
                    entry.worst_seed = s;
                }
            }
            Ok(entry)
        })
        .collect()
}
