use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::{all_anchors, assign_targets};
use super::config::DetectorConfig;
use super::loss::{focal_loss_normalized, positive_count, smooth_l1_normalized};
use super::nms::{decode_and_nms, Detection};
use crate::encoder::EventPillars;
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::event::{EventWindow, GroundTruthBox};
use crate::memory::{
    adaptive_convlstm_step, srm_forward, AdaptiveConvLstmParams, LrmState, SrmParams,
};
use crate::nn::{Conv2d, Graph, Mode, ParamStore, Pointwise, Tensor, Var};

/// Prior probability of the classification bias at initialization.
const CLASS_PRIOR: f64 = 0.01;

const MODEL_MAGIC: &[u8; 8] = b"EVPKDET1";

/// Mode used for detection. The only normalization sits in the pillar
/// encoder, whose batch is the pillars of a single window, so inference
/// keeps normalizing with the window's own statistics exactly as in training.
pub const INFERENCE_MODE: Mode = Mode::Train;

/// `relu(conv3x3_s1(relu(conv3x3_s2(x))) + conv1x1_s2(x))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 2, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng)?,
            shortcut: Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, 2, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y)?;
        let s = self.shortcut.forward(g, store, x)?;
        let y = g.add(y, s)?;
        Ok(g.relu(y))
    }
}

/// Head shared by all scales: conv3x3 + relu, then class and box convs.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub shared: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

/// Recurrent state of one scale as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    /// Backbone feature of the previous window.
    pub prev_feature: Tensor,
    pub lrm: LrmState,
}

/// State carried from window to window.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub scales: Vec<ScaleState>,
}

impl DetectorState {
    pub fn zeros(config: &DetectorConfig) -> Self {
        let scales = (0..3)
            .map(|i| {
                let n = config.scale_extent(i);
                ScaleState {
                    prev_feature: Tensor::zeros(&[n, n, config.widths[i]]),
                    lrm: LrmState::zeros(n, n, config.widths[i]),
                }
            })
            .collect();
        Self { scales }
    }

    pub fn is_finite(&self) -> bool {
        self.scales.iter().all(|s| s.prev_feature.is_finite() && s.lrm.is_finite())
    }
}

/// State of one scale bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ScaleVars {
    pub prev_feature: Var,
    pub h: Var,
    pub c: Var,
}

/// Constant graph inputs for `state`; gradients stop here.
pub fn bind_state(g: &mut Graph, state: &DetectorState) -> Vec<ScaleVars> {
    state
        .scales
        .iter()
        .map(|s| ScaleVars {
            prev_feature: g.input(s.prev_feature.clone()),
            h: g.input(s.lrm.h.clone()),
            c: g.input(s.lrm.c.clone()),
        })
        .collect()
}

/// Reads bound state back into values.
pub fn read_state(g: &Graph, vars: &[ScaleVars]) -> DetectorState {
    DetectorState {
        scales: vars
            .iter()
            .map(|v| ScaleState {
                prev_feature: g.value(v.prev_feature).clone(),
                lrm: LrmState { h: g.value(v.h).clone(), c: g.value(v.c).clone() },
            })
            .collect(),
    }
}

/// Per-window graph outputs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub features: Vec<Var>,
    pub fused: Vec<Var>,
    /// `cells x classes` per scale.
    pub logits: Vec<Var>,
    /// `cells x 4` per scale.
    pub deltas: Vec<Var>,
    pub state: Vec<ScaleVars>,
}

/// Component losses of one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowLoss {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
}

/// Pillar encoder, residual backbone, temporal memory, fusion and head, with
/// the parameters they own.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub encoder: EventPillars,
    pub blocks: [ResBlock; 3],
    pub srm: Vec<SrmParams>,
    pub lrm: Vec<AdaptiveConvLstmParams>,
    pub laterals: [Pointwise; 3],
    pub head: Head,
    anchors: Vec<Vec<BBox>>,
}

impl Detector {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EventPillars::new(&mut store, "encoder", config.encoder_channels, config.pillars, &mut rng)?;
        let w = config.widths;
        let cin = 2 * config.encoder_channels;
        let blocks = [
            ResBlock::new(&mut store, "backbone.0", cin, w[0], &mut rng)?,
            ResBlock::new(&mut store, "backbone.1", w[0], w[1], &mut rng)?,
            ResBlock::new(&mut store, "backbone.2", w[1], w[2], &mut rng)?,
        ];
        let mut srm = Vec::new();
        if config.memory.uses_srm() {
            for (i, &c) in w.iter().enumerate() {
                srm.push(SrmParams::new(&mut store, &format!("srm.{i}"), c, config.srm_reduction, &mut rng)?);
            }
        }
        let mut lrm = Vec::new();
        if config.memory.uses_lrm() {
            for (i, &c) in w.iter().enumerate() {
                lrm.push(AdaptiveConvLstmParams::new(&mut store, &format!("lrm.{i}"), c, c, &mut rng)?);
            }
        }
        let f = config.fusion_width;
        let laterals = [
            Pointwise::new(&mut store, "fusion.lateral0", w[0], f, &mut rng)?,
            Pointwise::new(&mut store, "fusion.lateral1", w[1], f, &mut rng)?,
            Pointwise::new(&mut store, "fusion.lateral2", w[2], f, &mut rng)?,
        ];
        let hw = config.head_width;
        let head = Head {
            shared: Conv2d::new(&mut store, "head.shared", f, hw, 3, 1, &mut rng)?,
            cls: Conv2d::new(&mut store, "head.cls", hw, config.num_classes, 3, 1, &mut rng)?,
            reg: Conv2d::new(&mut store, "head.reg", hw, 4, 3, 1, &mut rng)?,
        };
        store
            .value_mut(head.cls.bias)
            .data_mut()
            .fill(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
        let anchors = all_anchors(&config);
        Ok(Self { config, store, encoder, blocks, srm, lrm, laterals, head, anchors })
    }

    pub fn anchors(&self) -> &[Vec<BBox>] {
        &self.anchors
    }

    /// Pseudo-image of one window, checked against the configured input size.
    pub fn encode_window(&self, g: &mut Graph, window: &EventWindow, mode: Mode) -> Result<Var> {
        let img = self.encoder.forward(g, &self.store, window, mode)?;
        let s = self.config.input_size;
        if g.shape(img)[..2] != [s, s] {
            return Err(Error::Shape(format!(
                "pseudo-image is {:?}, detector expects {s}x{s}",
                &g.shape(img)[..2]
            )));
        }
        Ok(img)
    }

    /// Three backbone scales, each half the extent of the previous.
    pub fn backbone(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image);
        if shape.len() != 3 || shape[0] % 8 != 0 || shape[1] % 8 != 0 {
            return Err(Error::Shape(format!("backbone input {shape:?} must be H x W x C with H, W divisible by 8")));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(3);
        for b in &self.blocks {
            x = b.forward(g, &self.store, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Temporal memory, fusion and head on one pseudo-image.
    pub fn step(&self, g: &mut Graph, image: Var, state: &[ScaleVars]) -> Result<StepOutput> {
        if state.len() != 3 {
            return Err(Error::Config(format!("detector state has {} scales, expected 3", state.len())));
        }
        let features = self.backbone(g, image)?;
        let mut enhanced = Vec::with_capacity(3);
        let mut next = Vec::with_capacity(3);
        for (i, (&f, s)) in features.iter().zip(state).enumerate() {
            let x = if self.config.memory.uses_srm() {
                srm_forward(g, &self.store, f, s.prev_feature, &self.srm[i])?
            } else {
                f
            };
            let (e, h, c) = if self.config.memory.uses_lrm() {
                let st = adaptive_convlstm_step(g, &self.store, x, s.h, s.c, s.prev_feature, &self.lrm[i])?;
                (st.h, st.h, st.c)
            } else {
                (x, s.h, s.c)
            };
            enhanced.push(e);
            next.push(ScaleVars { prev_feature: f, h, c });
        }
        let mut fused = vec![enhanced[0]; 3];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, &self.store, enhanced[i])?;
            fused[i] = if self.config.skip_sum && i < 2 {
                let up = g.upsample2(fused[i + 1])?;
                g.add(lat, up)?
            } else {
                lat
            };
        }
        let mut logits = Vec::with_capacity(3);
        let mut deltas = Vec::with_capacity(3);
        for &p in &fused {
            let (cls, reg) = self.head_forward(g, p)?;
            logits.push(cls);
            deltas.push(reg);
        }
        Ok(StepOutput { features, fused, logits, deltas, state: next })
    }

    /// Class logits (`cells x classes`) and box deltas (`cells x 4`).
    pub fn head_forward(&self, g: &mut Graph, fused: Var) -> Result<(Var, Var)> {
        let (h, w) = (g.shape(fused)[0], g.shape(fused)[1]);
        let t = self.head.shared.forward(g, &self.store, fused)?;
        let t = g.relu(t);
        let cls = self.head.cls.forward(g, &self.store, t)?;
        let reg = self.head.reg.forward(g, &self.store, t)?;
        let cls = g.reshape(cls, &[h * w, self.config.num_classes])?;
        let reg = g.reshape(reg, &[h * w, 4])?;
        Ok((cls, reg))
    }

    /// Focal plus smooth-L1 loss of one window, both normalized by the
    /// positive anchor count over all scales.
    pub fn window_loss(&self, g: &mut Graph, out: &StepOutput, gts: &[GroundTruthBox]) -> Result<WindowLoss> {
        let boxes: Vec<(BBox, u16)> = gts.iter().map(|b| (b.bbox(), b.class_id)).collect();
        if let Some(b) = gts.iter().find(|b| usize::from(b.class_id) >= self.config.num_classes) {
            return Err(Error::Value(format!(
                "ground-truth class {} outside {} classes",
                b.class_id, self.config.num_classes
            )));
        }
        let targets: Vec<_> = self
            .anchors
            .iter()
            .map(|a| assign_targets(a, &boxes, self.config.positive_iou, self.config.negative_iou))
            .collect();
        let positives: usize = targets
            .iter()
            .map(|t| positive_count(&t.iter().map(|x| x.class).collect::<Vec<_>>()))
            .sum();
        let norm = positives.max(1) as f64;
        let mut terms = Vec::with_capacity(6);
        let (mut cls_v, mut reg_v) = (0.0, 0.0);
        for (i, t) in targets.iter().enumerate() {
            let classes: Vec<_> = t.iter().map(|x| x.class).collect();
            let deltas: Vec<[f64; 4]> = t.iter().map(|x| x.deltas).collect();
            let weights: Vec<f64> = t.iter().map(|x| x.weight).collect();
            let c = focal_loss_normalized(
                g,
                out.logits[i],
                &classes,
                self.config.focal_gamma,
                self.config.focal_alpha,
                norm,
            )?;
            let r = smooth_l1_normalized(g, out.deltas[i], &deltas, &weights, norm)?;
            cls_v += g.value(c).data()[0];
            reg_v += g.value(r).data()[0];
            terms.push(c);
            terms.push(r);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(WindowLoss { total, cls: cls_v, reg: reg_v, positives })
    }

    /// Decoded detections of one window's head outputs.
    pub fn detections(&self, g: &Graph, out: &StepOutput) -> Vec<Detection> {
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut anchors = Vec::new();
        for i in 0..3 {
            logits.extend_from_slice(g.value(out.logits[i]).data());
            deltas.extend_from_slice(g.value(out.deltas[i]).data());
            anchors.extend_from_slice(&self.anchors[i]);
        }
        decode_and_nms(
            &logits,
            &deltas,
            &anchors,
            self.config.num_classes,
            self.config.input_size as f64,
            self.config.score_threshold,
            self.config.nms_iou,
            self.config.max_detections,
        )
    }

    /// Runs one window from a value state; returns detections and the next state.
    pub fn infer_window(
        &self,
        window: &EventWindow,
        state: &DetectorState,
        mode: Mode,
    ) -> Result<(Vec<Detection>, DetectorState)> {
        let mut g = Graph::new();
        let img = self.encode_window(&mut g, window, mode)?;
        let vars = bind_state(&mut g, state);
        let out = self.step(&mut g, img, &vars)?;
        let dets = self.detections(&g, &out);
        Ok((dets, read_state(&g, &out.state)))
    }

    /// Model file: magic, u32 length and text of the config, then the
    /// parameter checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.store.to_checkpoint());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MODEL_MAGIC.as_slice())
            .ok_or_else(|| Error::Value("not a detector model file (bad magic)".into()))?;
        if body.len() < 4 {
            return Err(Error::Value("truncated detector model file".into()));
        }
        let n = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
        let text = body
            .get(4..4 + n)
            .ok_or_else(|| Error::Value("truncated detector model file".into()))?;
        let text = std::str::from_utf8(text).map_err(|_| Error::Value("model config is not UTF-8".into()))?;
        let mut det = Detector::new(DetectorConfig::parse_str(text)?)?;
        det.store.load_checkpoint(&body[4 + n..])?;
        Ok(det)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Value(m) | Error::Config(m) => Error::Value(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Detections for every window of a sequence, state threaded causally.
    pub fn infer_sequence(&self, windows: &[EventWindow], mode: Mode) -> Result<Vec<Vec<Detection>>> {
        let mut state = DetectorState::zeros(&self.config);
        let mut out = Vec::with_capacity(windows.len());
        for w in windows {
            let (d, s) = self.infer_window(w, &state, mode)?;
            if !s.is_finite() || d.iter().any(|d| !d.score.is_finite()) {
                return Err(Error::Numeric(format!("non-finite detector state at window {}", out.len())));
            }
            out.push(d);
            state = s;
        }
        Ok(out)
    }
}
