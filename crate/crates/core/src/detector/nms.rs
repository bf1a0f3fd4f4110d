use std::cmp::Ordering;

use super::anchors::decode_deltas;
use crate::eval::{iou_unchecked, BBox};
use crate::nn::kernels::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u16,
    /// Index of the originating anchor over all scales.
    pub anchor: usize,
}

/// Descending score, then ascending anchor index.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor))
}

/// Greedy suppression within each class: keep the best remaining box and
/// drop every same-class box overlapping it by more than `iou_thr`.
pub fn nms(mut candidates: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    candidates.sort_by(rank);
    let mut keep: Vec<Detection> = Vec::new();
    for c in candidates {
        if keep
            .iter()
            .all(|k| k.class_id != c.class_id || iou_unchecked(&k.bbox, &c.bbox) <= iou_thr)
        {
            keep.push(c);
        }
    }
    keep
}

/// Scores every (anchor, class) pair with a sigmoid, decodes boxes, clips
/// them to the `size x size` input, drops scores below `score_thr` and
/// degenerate boxes, then applies per-class NMS. `logits` is
/// `anchors x classes` and `deltas` `anchors x 4`, both row-major.
#[allow(clippy::too_many_arguments)]
pub fn decode_and_nms(
    logits: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    classes: usize,
    size: f64,
    score_thr: f64,
    iou_thr: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let mut decoded = None;
        for k in 0..classes {
            let score = sigmoid(logits[a * classes + k]);
            if score < score_thr {
                continue;
            }
            let bbox = *decoded.get_or_insert_with(|| decode_deltas(anchor, &deltas[a * 4..a * 4 + 4]).clip(size, size));
            if bbox.is_valid() {
                candidates.push(Detection { bbox, score, class_id: k as u16, anchor: a });
            }
        }
    }
    let mut kept = nms(candidates, iou_thr);
    kept.truncate(max_detections);
    kept
}
