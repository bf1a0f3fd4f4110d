//! COCO-style detection metrics: IoU, greedy score-ordered matching,
//! 101-point interpolated average precision, mAP@0.5 and mAP@0.5:0.95.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

/// Intersection over union; zero-area boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Value(format!(
            "degenerate box in IoU: {a:?} vs {b:?}"
        )));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A scored prediction on one image (window).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDetection {
    pub image: usize,
    pub class_id: u16,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGroundTruth {
    pub image: usize,
    pub class_id: u16,
    pub bbox: BBox,
}

/// Greedy matching for detections already sorted by descending score: each
/// detection takes the highest-IoU unmatched ground truth of its image and
/// class with IoU at least `iou_thr`.
pub fn match_detections(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_thr: f64,
) -> Result<Vec<bool>> {
    if dets.windows(2).any(|w| w[1].score > w[0].score) {
        return Err(Error::Value(
            "detections must be sorted by descending score".into(),
        ));
    }
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image != d.image || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox)?;
            if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(flags)
}

/// 101-point interpolated AP. Returns `None` when there is neither ground
/// truth nor any detection (the class is excluded from means).
pub fn average_precision(matched: &[bool], scores: &[f64], gt_count: usize) -> Result<Option<f64>> {
    if matched.len() != scores.len() {
        return Err(Error::Value(format!(
            "{} match flags but {} scores",
            matched.len(),
            scores.len()
        )));
    }
    if gt_count == 0 {
        return Ok(if matched.is_empty() { None } else { Some(0.0) });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut tp_cum = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if matched[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        tp_cum.push(tp);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        // recall >= r / 100, compared in integers
        while idx < tp_cum.len() && tp_cum[idx] * 100 < r * gt_count {
            idx += 1;
        }
        if idx < tp_cum.len() {
            total += precision[idx];
        }
    }
    Ok(Some(total / RECALL_POINTS as f64))
}

/// Per-class breakdown inside [`EvalResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: u16,
    /// AP at each of [`IOU_THRESHOLDS`]; `None` when undefined.
    pub ap: [Option<f64>; 10],
    pub gt_count: usize,
    pub det_count: usize,
}

impl ClassAp {
    pub fn ap50(&self) -> Option<f64> {
        self.ap[0]
    }

    pub fn ap50_95(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.ap.iter().copied().collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub classes: Vec<ClassAp>,
    pub map50: f64,
    pub map50_95: f64,
    pub gt_count: usize,
    pub det_count: usize,
    /// Detections matched at IoU 0.5.
    pub matched50: usize,
}

impl EvalResult {
    /// `key=value` lines with a fixed key order.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "map50={:.6}", self.map50);
        let _ = writeln!(out, "map50_95={:.6}", self.map50_95);
        let _ = writeln!(out, "gt_count={}", self.gt_count);
        let _ = writeln!(out, "det_count={}", self.det_count);
        let _ = writeln!(out, "matched50={}", self.matched50);
        for c in &self.classes {
            let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "class.{}.ap50={}", c.class_id, fmt(c.ap50()));
            let _ = writeln!(out, "class.{}.ap50_95={}", c.class_id, fmt(c.ap50_95()));
            let _ = writeln!(out, "class.{}.gt_count={}", c.class_id, c.gt_count);
            let _ = writeln!(out, "class.{}.det_count={}", c.class_id, c.det_count);
        }
        out
    }
}

/// COCO-style evaluation over all images and classes.
pub fn map_coco(dets: &[EvalDetection], gts: &[EvalGroundTruth]) -> Result<EvalResult> {
    let mut by_class: BTreeMap<u16, (Vec<EvalDetection>, Vec<EvalGroundTruth>)> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().0.push(*d);
    }
    for g in gts {
        by_class.entry(g.class_id).or_default().1.push(*g);
    }

    let mut classes = Vec::with_capacity(by_class.len());
    let mut matched50 = 0;
    for (class_id, (mut cdets, cgts)) in by_class {
        // stable: equal scores keep input order
        cdets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let scores: Vec<f64> = cdets.iter().map(|d| d.score).collect();
        let mut ap = [None; 10];
        for (slot, &thr) in ap.iter_mut().zip(IOU_THRESHOLDS.iter()) {
            let flags = match_detections(&cdets, &cgts, thr)?;
            if thr == 0.5 {
                matched50 += flags.iter().filter(|&&f| f).count();
            }
            *slot = average_precision(&flags, &scores, cgts.len())?;
        }
        classes.push(ClassAp {
            class_id,
            ap,
            gt_count: cgts.len(),
            det_count: cdets.len(),
        });
    }

    let defined: Vec<&ClassAp> = classes.iter().filter(|c| c.ap[0].is_some()).collect();
    let (map50, map50_95) = if defined.is_empty() {
        (0.0, 0.0)
    } else {
        let n = defined.len() as f64;
        (
            defined.iter().filter_map(|c| c.ap50()).sum::<f64>() / n,
            defined.iter().filter_map(|c| c.ap50_95()).sum::<f64>() / n,
        )
    };
    Ok(EvalResult {
        classes,
        map50,
        map50_95,
        gt_count: gts.len(),
        det_count: dets.len(),
        matched50,
    })
}
