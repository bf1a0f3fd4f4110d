use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{bind_state, read_state, Detector, DetectorState};
use crate::error::{Error, Result};
use crate::event::{EventWindow, GroundTruthBox, SyntheticSequence};
use crate::nn::{cosine_lr, Adam, Gradients, Graph, Mode};

/// One optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub sequence: usize,
    pub first_window: usize,
    /// Mean window loss of the chunk.
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `step,epoch,sequence,first_window,loss,cls,reg,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,sequence,first_window,loss,cls,reg,lr\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9},{:.9},{:.9},{:.9e}",
                r.step, r.epoch, r.sequence, r.first_window, r.loss, r.cls, r.reg, r.lr
            );
        }
        s
    }
}

/// Optimizer updates one pass over `data` takes.
pub fn steps_per_epoch(data: &[SyntheticSequence], bptt: usize) -> usize {
    data.iter().map(|s| s.windows.len().div_ceil(bptt)).sum()
}

/// Chunk forward pass: windows share one tape, `state` enters as constants.
struct ChunkPass {
    graph: Graph,
    loss: crate::nn::Var,
    cls: f64,
    reg: f64,
    state: DetectorState,
}

fn chunk_forward(
    det: &Detector,
    windows: &[EventWindow],
    gts: &[Vec<GroundTruthBox>],
    state: &DetectorState,
) -> Result<ChunkPass> {
    let mut g = Graph::new();
    let mut vars = bind_state(&mut g, state);
    let mut total = None;
    let (mut cls, mut reg) = (0.0, 0.0);
    for (w, gt) in windows.iter().zip(gts) {
        let img = det.encode_window(&mut g, w, Mode::Train)?;
        let out = det.step(&mut g, img, &vars)?;
        let l = det.window_loss(&mut g, &out, gt)?;
        cls += l.cls;
        reg += l.reg;
        total = Some(match total {
            None => l.total,
            Some(t) => g.add(t, l.total)?,
        });
        vars = out.state;
    }
    let total = total.ok_or_else(|| Error::Value("empty training chunk".into()))?;
    let n = windows.len() as f64;
    let loss = g.scale(total, 1.0 / n);
    let state = read_state(&g, &vars);
    Ok(ChunkPass { graph: g, loss, cls: cls / n, reg: reg / n, state })
}

fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

/// Truncated-BPTT training. Each sequence starts from a zero state; state
/// values cross chunk boundaries but gradients stop there. One chunk of
/// `bptt` windows is one Adam update with a cosine learning rate over all
/// updates of `config.epochs` epochs. Sequence order is shuffled per epoch
/// from `config.seed`.
pub fn train_sequences(det: &mut Detector, data: &[SyntheticSequence]) -> Result<TrainReport> {
    let cfg = det.config.clone();
    let total_steps = steps_per_epoch(data, cfg.bptt) * cfg.epochs;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea1_7ea1);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let seq = &data[si];
            let mut state = DetectorState::zeros(&cfg);
            for start in (0..seq.windows.len()).step_by(cfg.bptt) {
                let end = (start + cfg.bptt).min(seq.windows.len());
                let step = report.steps.len();
                let mut pass = chunk_forward(det, &seq.windows[start..end], &seq.ground_truth[start..end], &state)?;
                let loss = pass.graph.value(pass.loss).data()[0];
                if !loss.is_finite() || !pass.state.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss at step {step} (epoch {epoch}, sequence {si}, windows {start}..{end}): total={loss} cls={} reg={}",
                        pass.cls, pass.reg
                    )));
                }
                pass.graph.backward(pass.loss)?;
                let mut grads = Gradients::new();
                pass.graph.collect_param_grads(&det.store, &mut grads);
                clip_gradients(&mut grads, cfg.grad_clip);
                pass.graph.apply_buffer_updates(&mut det.store);
                let lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
                adam.lr = lr;
                adam.step(&mut det.store, &grads).map_err(|e| match e {
                    Error::NonFiniteGradient(p) => {
                        Error::Numeric(format!("non-finite gradient for `{p}` at step {step}: loss={loss}"))
                    }
                    other => other,
                })?;
                report.steps.push(StepRecord {
                    step,
                    epoch,
                    sequence: si,
                    first_window: start,
                    loss,
                    cls: pass.cls,
                    reg: pass.reg,
                    lr,
                });
                state = pass.state;
            }
        }
    }
    Ok(report)
}

/// Squared-gradient magnitude of the last chunk's loss with respect to every
/// window's pseudo-image, under truncation length `bptt`. Windows outside
/// the last chunk are reported as exactly zero.
pub fn input_sensitivity(det: &Detector, windows: &[EventWindow], gts: &[Vec<GroundTruthBox>], bptt: usize) -> Result<Vec<f64>> {
    if bptt == 0 || windows.is_empty() || windows.len() != gts.len() {
        return Err(Error::Value("sensitivity probe needs bptt >= 1 and one label list per window".into()));
    }
    let mut out = vec![0.0; windows.len()];
    let mut state = DetectorState::zeros(&det.config);
    let last_start = (windows.len() - 1) / bptt * bptt;
    for start in (0..windows.len()).step_by(bptt) {
        let end = (start + bptt).min(windows.len());
        let mut g = Graph::new();
        let mut vars = bind_state(&mut g, &state);
        let mut images = Vec::new();
        let mut total = None;
        for (w, gt) in windows[start..end].iter().zip(&gts[start..end]) {
            let enc = det.encode_window(&mut g, w, Mode::Train)?;
            let img = g.leaf(g.value(enc).clone());
            images.push(img);
            let o = det.step(&mut g, img, &vars)?;
            let l = det.window_loss(&mut g, &o, gt)?;
            total = Some(match total {
                None => l.total,
                Some(t) => g.add(t, l.total)?,
            });
            vars = o.state;
        }
        if start == last_start {
            let total = total.expect("non-empty chunk");
            g.backward(total)?;
            for (k, img) in images.iter().enumerate() {
                out[start + k] = g.grad(*img).map_or(0.0, |d| d.iter().map(|v| v * v).sum());
            }
        }
        state = read_state(&g, &vars);
    }
    Ok(out)
}
