use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::model::{Detector, INFERENCE_MODE};
use super::nms::Detection;
use crate::error::{Error, Result};
use crate::eval::{map_coco, BBox, EvalDetection, EvalGroundTruth, EvalResult};
use crate::event::SyntheticSequence;

/// Detections and labels of several sequences, windows numbered globally in
/// sequence order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub detections: Vec<EvalDetection>,
    pub ground_truth: Vec<EvalGroundTruth>,
}

impl Predictions {
    pub fn evaluate(&self) -> Result<EvalResult> {
        map_coco(&self.detections, &self.ground_truth)
    }
}

fn to_eval(image: usize, d: &Detection) -> EvalDetection {
    EvalDetection { image, class_id: d.class_id, score: d.score, bbox: d.bbox }
}

/// Runs the detector over every sequence from a zero state.
pub fn predict(det: &Detector, seqs: &[SyntheticSequence]) -> Result<Predictions> {
    let mut out = Predictions::default();
    let mut base = 0;
    for seq in seqs {
        let per_window = det.infer_sequence(&seq.windows, INFERENCE_MODE)?;
        for (k, (dets, gts)) in per_window.iter().zip(&seq.ground_truth).enumerate() {
            out.detections.extend(dets.iter().map(|d| to_eval(base + k, d)));
            out.ground_truth.extend(gts.iter().map(|g| EvalGroundTruth {
                image: base + k,
                class_id: g.class_id,
                bbox: g.bbox(),
            }));
        }
        base += seq.windows.len();
    }
    Ok(out)
}

pub fn evaluate(det: &Detector, seqs: &[SyntheticSequence]) -> Result<EvalResult> {
    predict(det, seqs)?.evaluate()
}

/// `window_idx,class_id,score,x_min,y_min,x_max,y_max`, six decimals.
pub fn detections_to_csv(dets: &[EvalDetection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            d.image, d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    s
}

/// Parses [`detections_to_csv`] output. Blank lines and `#` comments are skipped.
pub fn parse_detections_csv(text: &str) -> Result<Vec<EvalDetection>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Value(format!("line {}: {what} in detection `{line}`", idx + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad(&format!("expected 7 fields, got {}", f.len())));
        }
        let image = f[0].parse().map_err(|_| bad("bad window_idx"))?;
        let class_id = f[1].parse().map_err(|_| bad("bad class_id"))?;
        let mut nums = [0.0f64; 5];
        for (v, s) in nums.iter_mut().zip(&f[2..]) {
            *v = s.parse().map_err(|_| bad("bad number"))?;
            if !v.is_finite() {
                return Err(bad("non-finite number"));
            }
        }
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4]);
        if !bbox.is_valid() {
            return Err(bad("degenerate box"));
        }
        out.push(EvalDetection { image, class_id, score: nums[0], bbox });
    }
    Ok(out)
}

pub fn read_detections_file(path: &Path) -> Result<Vec<EvalDetection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_csv(&text).map_err(|e| match e {
        Error::Value(m) => Error::Value(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_detections_file(dets: &[EvalDetection], path: &Path) -> Result<()> {
    fs::write(path, detections_to_csv(dets)).map_err(|e| Error::io(path, e))
}

/// mAP@0.5 of the same trained detector with the pillar budget capped at
/// each `K` in turn.
pub fn sweep_pillars(det: &Detector, seqs: &[SyntheticSequence], budgets: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(budgets.len());
    for &k in budgets {
        if k == 0 {
            return Err(Error::Config("pillar budget must be at least 1".into()));
        }
        let mut d = det.clone();
        d.config.pillars.max_pillars = k;
        d.encoder.pillars.max_pillars = k;
        out.push((k, evaluate(&d, seqs)?.map50));
    }
    Ok(out)
}
