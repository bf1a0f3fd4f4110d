use super::config::{DetectorConfig, STRIDES};
use crate::eval::{iou_unchecked, BBox};

/// Largest log-scale delta accepted when decoding (`ln(1000 / 16)`).
const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

/// One square anchor per cell, centred in the cell, row-major per scale.
pub fn scale_anchors(config: &DetectorConfig, scale: usize) -> Vec<BBox> {
    let stride = STRIDES[scale] as f64;
    let n = config.scale_extent(scale);
    let side = config.anchor_scale * stride;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(BBox::from_center(
                (x as f64 + 0.5) * stride,
                (y as f64 + 0.5) * stride,
                side,
                side,
            ));
        }
    }
    out
}

/// Anchors of every scale, finest first.
pub fn all_anchors(config: &DetectorConfig) -> Vec<Vec<BBox>> {
    (0..STRIDES.len()).map(|s| scale_anchors(config, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    Positive(u16),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub class: ClassTarget,
    pub deltas: [f64; 4],
    /// Regression weight: 1 for positives, 0 otherwise.
    pub weight: f64,
}

/// `(dcx / w_a, dcy / h_a, ln(w / w_a), ln(h / h_a))`.
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_deltas(anchor: &BBox, d: &[f64]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        acx + d[0] * aw,
        acy + d[1] * ah,
        aw * d[2].min(MAX_LOG_DELTA).exp(),
        ah * d[3].min(MAX_LOG_DELTA).exp(),
    )
}

/// Positive when the best IoU with any ground truth reaches `positive_iou`
/// (matched to that box, first box on ties), negative below `negative_iou`,
/// ignored in between.
pub fn assign_targets(
    anchors: &[BBox],
    gts: &[(BBox, u16)],
    positive_iou: f64,
    negative_iou: f64,
) -> Vec<AnchorTarget> {
    anchors
        .iter()
        .map(|a| {
            let mut best = (0.0, usize::MAX);
            for (j, (g, _)) in gts.iter().enumerate() {
                let v = iou_unchecked(a, g);
                if v > best.0 {
                    best = (v, j);
                }
            }
            if best.1 != usize::MAX && best.0 >= positive_iou {
                let (g, class) = &gts[best.1];
                AnchorTarget {
                    class: ClassTarget::Positive(*class),
                    deltas: encode_deltas(a, g),
                    weight: 1.0,
                }
            } else {
                let class = if best.0 < negative_iou { ClassTarget::Negative } else { ClassTarget::Ignore };
                AnchorTarget { class, deltas: [0.0; 4], weight: 0.0 }
            }
        })
        .collect()
}
