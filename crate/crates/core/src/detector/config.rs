use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pillars::PillarConfig;

/// Which temporal memory modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryVariant {
    /// Plain feed-forward detector.
    None,
    /// Adaptive ConvLSTM at every scale.
    Lrm,
    /// Attention over the previous window followed by the ConvLSTM.
    Full,
}

impl MemoryVariant {
    pub const ALL: [MemoryVariant; 3] = [MemoryVariant::None, MemoryVariant::Lrm, MemoryVariant::Full];

    pub fn name(self) -> &'static str {
        match self {
            MemoryVariant::None => "none",
            MemoryVariant::Lrm => "lrm",
            MemoryVariant::Full => "full",
        }
    }

    pub fn uses_srm(self) -> bool {
        self == MemoryVariant::Full
    }

    pub fn uses_lrm(self) -> bool {
        self != MemoryVariant::None
    }
}

impl FromStr for MemoryVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown memory variant `{s}` (expected none, lrm or full)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Square input extent in pixels; must be divisible by 8.
    pub input_size: usize,
    /// Encoder output width per polarity (C').
    pub encoder_channels: usize,
    pub widths: [usize; 3],
    pub fusion_width: usize,
    pub head_width: usize,
    pub num_classes: usize,
    /// Anchor side as a multiple of the scale stride.
    pub anchor_scale: f64,
    pub srm_reduction: usize,
    pub memory: MemoryVariant,
    pub skip_sum: bool,
    pub pillars: PillarConfig,
    pub window_us: u64,
    pub bptt: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_channels: 16,
            widths: [16, 32, 64],
            fusion_width: 32,
            head_width: 32,
            num_classes: 2,
            anchor_scale: 4.0,
            srm_reduction: 8,
            memory: MemoryVariant::Full,
            skip_sum: true,
            pillars: PillarConfig::default(),
            window_us: 50_000,
            bptt: 10,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            positive_iou: 0.5,
            negative_iou: 0.4,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            lr: 2e-4,
            lr_min: 0.0,
            grad_clip: 0.0,
            epochs: 1,
            seed: 0,
        }
    }
}

/// Strides of the three scales relative to the input.
pub const STRIDES: [usize; 3] = [2, 4, 8];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 8", self.input_size));
        }
        if self.widths.contains(&0) || self.fusion_width == 0 || self.head_width == 0 || self.encoder_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.memory.uses_srm() {
            if let Some(w) = self.widths.iter().find(|&&w| w % self.srm_reduction.max(1) != 0 || self.srm_reduction == 0) {
                return bad(format!("width {w} is not divisible by srm_reduction {}", self.srm_reduction));
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.bptt == 0 {
            return bad("bptt must be at least 1".into());
        }
        if self.window_us == 0 {
            return bad("window must be longer than zero".into());
        }
        if !(self.negative_iou <= self.positive_iou && self.positive_iou <= 1.0 && self.negative_iou >= 0.0) {
            return bad(format!(
                "assignment thresholds need 0 <= negative ({}) <= positive ({}) <= 1",
                self.negative_iou, self.positive_iou
            ));
        }
        if !(self.anchor_scale > 0.0 && self.lr > 0.0 && self.lr_min >= 0.0 && self.grad_clip >= 0.0) {
            return bad("anchor_scale and lr must be positive; lr_min and grad_clip non-negative".into());
        }
        self.pillars.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "input_size" => self.input_size = parse(key, value)?,
            "encoder_channels" => self.encoder_channels = parse(key, value)?,
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`widths` needs three values, got `{value}`")))?;
            }
            "fusion_width" => self.fusion_width = parse(key, value)?,
            "head_width" => self.head_width = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "anchor_scale" => self.anchor_scale = parse(key, value)?,
            "srm_reduction" => self.srm_reduction = parse(key, value)?,
            "memory" => self.memory = value.parse()?,
            "skip_sum" => self.skip_sum = parse_bool(key, value)?,
            "max_events" => self.pillars.max_events = parse(key, value)?,
            "max_pillars" => self.pillars.max_pillars = parse(key, value)?,
            "time_slices" => self.pillars.time_slices = parse(key, value)?,
            "cell_size" => self.pillars.cell_size = parse(key, value)?,
            "pillar_seed" => self.pillars.seed = parse(key, value)?,
            "window_ms" => {
                let ms: f64 = parse(key, value)?;
                if !(ms > 0.0) {
                    return Err(Error::Config(format!("window_ms must be positive, got {value}")));
                }
                self.window_us = (ms * 1000.0).round() as u64;
            }
            "bptt" => self.bptt = parse(key, value)?,
            "focal_gamma" => self.focal_gamma = parse(key, value)?,
            "focal_alpha" => self.focal_alpha = parse(key, value)?,
            "positive_iou" => self.positive_iou = parse(key, value)?,
            "negative_iou" => self.negative_iou = parse(key, value)?,
            "nms_iou" => self.nms_iou = parse(key, value)?,
            "score_threshold" => self.score_threshold = parse(key, value)?,
            "max_detections" => self.max_detections = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text over the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every key in a stable order; `parse_str(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.widths;
        let p = &self.pillars;
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "encoder_channels={}", self.encoder_channels);
        let _ = writeln!(s, "widths={},{},{}", w[0], w[1], w[2]);
        let _ = writeln!(s, "fusion_width={}", self.fusion_width);
        let _ = writeln!(s, "head_width={}", self.head_width);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "anchor_scale={}", self.anchor_scale);
        let _ = writeln!(s, "srm_reduction={}", self.srm_reduction);
        let _ = writeln!(s, "memory={}", self.memory.name());
        let _ = writeln!(s, "skip_sum={}", self.skip_sum);
        let _ = writeln!(s, "max_events={}", p.max_events);
        let _ = writeln!(s, "max_pillars={}", p.max_pillars);
        let _ = writeln!(s, "time_slices={}", p.time_slices);
        let _ = writeln!(s, "cell_size={}", p.cell_size);
        let _ = writeln!(s, "pillar_seed={}", p.seed);
        let _ = writeln!(s, "window_ms={}", self.window_us as f64 / 1000.0);
        let _ = writeln!(s, "bptt={}", self.bptt);
        let _ = writeln!(s, "focal_gamma={}", self.focal_gamma);
        let _ = writeln!(s, "focal_alpha={}", self.focal_alpha);
        let _ = writeln!(s, "positive_iou={}", self.positive_iou);
        let _ = writeln!(s, "negative_iou={}", self.negative_iou);
        let _ = writeln!(s, "nms_iou={}", self.nms_iou);
        let _ = writeln!(s, "score_threshold={}", self.score_threshold);
        let _ = writeln!(s, "max_detections={}", self.max_detections);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_min={}", self.lr_min);
        let _ = writeln!(s, "grad_clip={}", self.grad_clip);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Spatial extent of scale `i`.
    pub fn scale_extent(&self, i: usize) -> usize {
        self.input_size / STRIDES[i]
    }
}
