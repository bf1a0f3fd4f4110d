//! Hand-crafted dense event representations. Every kind maps one
//! [`EventWindow`] to an `H x W x C` [`GridTensor`] in raw units (no
//! normalization), so they can be swapped for the learned pillar encoder.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::event::{EventWindow, Polarity};

const GTN_MAGIC: &[u8; 4] = b"GTN1";

/// Dense `H x W x C` grid stored row-major in `(y, x, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    labels: Vec<String>,
}

impl GridTensor {
    pub fn zeros(height: usize, width: usize, labels: Vec<String>) -> Self {
        let channels = labels.len();
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            labels,
        }
    }

    pub fn from_data(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        let labels = labels.unwrap_or_else(|| (0..channels).map(|c| format!("c{c}")).collect());
        if labels.len() != channels {
            return Err(Error::Shape(format!(
                "{} labels for {channels} channels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let i = self.offset(y, x, c);
        &mut self.data[i]
    }

    /// Copies out one channel as an `H x W` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values rounded through `f32`, i.e. what a GTN1 file stores.
    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f64::from(*v as f32);
        }
        out
    }

    /// Serializes as `GTN1`, u16 H, u16 W, u16 C, then `H*W*C` little-endian
    /// f32 values in `(y, x, c)` order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} exceeds u16 in GTN1")))
        };
        let mut out = Vec::with_capacity(10 + self.data.len() * 4);
        out.extend_from_slice(GTN_MAGIC);
        out.extend_from_slice(&dim(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&dim(self.width, "width")?.to_le_bytes());
        out.extend_from_slice(&dim(self.channels, "channel count")?.to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != GTN_MAGIC {
            return Err(Error::Value("missing GTN1 header".into()));
        }
        let h = usize::from(u16::from_le_bytes([bytes[4], bytes[5]]));
        let w = usize::from(u16::from_le_bytes([bytes[6], bytes[7]]));
        let c = usize::from(u16::from_le_bytes([bytes[8], bytes[9]]));
        let body = &bytes[10..];
        if body.len() != h * w * c * 4 {
            return Err(Error::Value(format!(
                "GTN1 body holds {} bytes, expected {}",
                body.len(),
                h * w * c * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Self::from_data(h, w, c, data, None)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Which hand-crafted representation to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReprKind {
    EventFrame,
    EventCount,
    TimestampImage,
    TimeSurface,
    EvSegnetStats,
    VoxelGrid,
}

impl ReprKind {
    pub const ALL: [ReprKind; 6] = [
        ReprKind::EventFrame,
        ReprKind::EventCount,
        ReprKind::TimestampImage,
        ReprKind::TimeSurface,
        ReprKind::EvSegnetStats,
        ReprKind::VoxelGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReprKind::EventFrame => "event_frame",
            ReprKind::EventCount => "event_count",
            ReprKind::TimestampImage => "timestamp_image",
            ReprKind::TimeSurface => "time_surface",
            ReprKind::EvSegnetStats => "ev_segnet_stats",
            ReprKind::VoxelGrid => "voxel_grid",
        }
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReprKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ReprKind::ALL.iter().map(|k| k.name()).collect();
                Error::Value(format!(
                    "unknown representation `{s}`; valid kinds: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprConfig {
    pub kind: ReprKind,
    /// Temporal bins for `voxel_grid`.
    pub bins: usize,
    /// Decay constant for `time_surface`; `None` means the window length.
    pub tau_decay_us: Option<u64>,
}

impl ReprConfig {
    pub fn new(kind: ReprKind) -> Self {
        Self {
            kind,
            bins: 5,
            tau_decay_us: None,
        }
    }

    pub fn compute(&self, window: &EventWindow) -> Result<GridTensor> {
        match self.kind {
            ReprKind::EventFrame => Ok(event_frame(window)),
            ReprKind::EventCount => Ok(event_count(window)),
            ReprKind::TimestampImage => Ok(timestamp_image(window)),
            ReprKind::TimeSurface => {
                time_surface(window, self.tau_decay_us.unwrap_or(window.duration()))
            }
            ReprKind::EvSegnetStats => Ok(ev_segnet_stats(window)),
            ReprKind::VoxelGrid => voxel_grid(window, self.bins),
        }
    }
}

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn polarity_channel(p: Polarity) -> usize {
    match p {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
    }
}

/// Per-pixel sum of polarities.
pub fn event_frame(window: &EventWindow) -> GridTensor {
    let g = window.geometry();
    let mut out = GridTensor::zeros(g.height(), g.width(), labels(&["polarity_sum"]));
    for e in window.events() {
        *out.at_mut(usize::from(e.y), usize::from(e.x), 0) += e.p.as_f64();
    }
    out
}

/// Separate per-pixel counts of positive (channel 0) and negative (channel 1) events.
pub fn event_count(window: &EventWindow) -> GridTensor {
    let g = window.geometry();
    let (w, c) = (g.width(), 2);
    let mut data = vec![0.0; g.height() * w * c];
    for e in window.events() {
        data[(usize::from(e.y) * w + usize::from(e.x)) * c + polarity_channel(e.p)] += 1.0;
    }
    GridTensor {
        height: g.height(),
        width: w,
        channels: c,
        data,
        labels: labels(&["count_pos", "count_neg"]),
    }
}

/// Normalized time of the newest event per pixel and polarity. Later events
/// in stream order win timestamp ties.
pub fn timestamp_image(window: &EventWindow) -> GridTensor {
    let g = window.geometry();
    let mut out = GridTensor::zeros(g.height(), g.width(), labels(&["t_last_pos", "t_last_neg"]));
    for e in window.events() {
        *out.at_mut(usize::from(e.y), usize::from(e.x), polarity_channel(e.p)) =
            window.normalized_time(e.t);
    }
    out
}

/// `exp(-(t_end - t_last) / tau)` per pixel and polarity, zero where no event.
pub fn time_surface(window: &EventWindow, tau_decay_us: u64) -> Result<GridTensor> {
    if tau_decay_us == 0 {
        return Err(Error::Value("time surface decay must be positive".into()));
    }
    let g = window.geometry();
    let mut out = GridTensor::zeros(g.height(), g.width(), labels(&["surface_pos", "surface_neg"]));
    let tau = tau_decay_us as f64;
    for e in window.events() {
        *out.at_mut(usize::from(e.y), usize::from(e.x), polarity_channel(e.p)) =
            (-((window.t_end() - e.t) as f64) / tau).exp();
    }
    Ok(out)
}

/// Per polarity: event count, mean and population standard deviation of
/// normalized timestamps.
pub fn ev_segnet_stats(window: &EventWindow) -> GridTensor {
    let g = window.geometry();
    let mut out = GridTensor::zeros(
        g.height(),
        g.width(),
        labels(&["count_pos", "mean_t_pos", "std_t_pos", "count_neg", "mean_t_neg", "std_t_neg"]),
    );
    // accumulate count, sum and sum of squares, then finalize in place
    let mut sq = vec![0.0; g.pixels() * 2];
    for e in window.events() {
        let (y, x) = (usize::from(e.y), usize::from(e.x));
        let pc = polarity_channel(e.p);
        let t = window.normalized_time(e.t);
        *out.at_mut(y, x, 3 * pc) += 1.0;
        *out.at_mut(y, x, 3 * pc + 1) += t;
        sq[(y * g.width() + x) * 2 + pc] += t * t;
    }
    for y in 0..g.height() {
        for x in 0..g.width() {
            for pc in 0..2 {
                let n = out.get(y, x, 3 * pc);
                if n == 0.0 {
                    continue;
                }
                let mean = out.get(y, x, 3 * pc + 1) / n;
                let var = (sq[(y * g.width() + x) * 2 + pc] / n - mean * mean).max(0.0);
                *out.at_mut(y, x, 3 * pc + 1) = mean;
                *out.at_mut(y, x, 3 * pc + 2) = if n == 1.0 { 0.0 } else { var.sqrt() };
            }
        }
    }
    out
}

/// Bilinear temporal binning of polarities into `bins` channels.
pub fn voxel_grid(window: &EventWindow, bins: usize) -> Result<GridTensor> {
    if bins == 0 {
        return Err(Error::Value("voxel grid needs at least one bin".into()));
    }
    let g = window.geometry();
    let names: Vec<String> = (0..bins).map(|b| format!("bin{b}")).collect();
    let mut out = GridTensor::zeros(g.height(), g.width(), names);
    let scale = (bins - 1) as f64;
    for e in window.events() {
        let (y, x) = (usize::from(e.y), usize::from(e.x));
        let p = e.p.as_f64();
        let tn = window.normalized_time(e.t) * scale;
        let lo = (tn.floor() as usize).min(bins - 1);
        let frac = tn - lo as f64;
        if frac == 0.0 {
            *out.at_mut(y, x, lo) += p;
        } else {
            *out.at_mut(y, x, lo) += p * (1.0 - frac);
            if lo + 1 < bins {
                *out.at_mut(y, x, lo + 1) += p * frac;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, SensorGeometry};

    fn geom() -> SensorGeometry {
        SensorGeometry::new(6, 5).unwrap()
    }

    fn window(events: Vec<Event>) -> EventWindow {
        EventWindow::new(events, 0, 1000, geom()).unwrap()
    }

    fn pos(x: u16, y: u16, t: u64) -> Event {
        Event::new(x, y, t, Polarity::Positive)
    }

    fn neg(x: u16, y: u16, t: u64) -> Event {
        Event::new(x, y, t, Polarity::Negative)
    }

    #[test]
    fn event_frame_single_and_cancel() {
        let f = event_frame(&window(vec![pos(2, 3, 10)]));
        assert_eq!(f.get(3, 2, 0), 1.0);
        assert_eq!(f.data().iter().sum::<f64>(), 1.0);
        let f = event_frame(&window(vec![pos(2, 3, 10), neg(2, 3, 20)]));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn event_count_channels() {
        let c = event_count(&window(vec![pos(1, 1, 1), pos(1, 1, 2), pos(1, 1, 3), neg(0, 0, 4)]));
        assert_eq!(c.get(1, 1, 0), 3.0);
        assert_eq!(c.get(0, 0, 1), 1.0);
        let empty = event_count(&window(vec![]));
        assert!(empty.data().iter().all(|&v| v == 0.0));
        assert_eq!(empty.channels(), 2);
    }

    #[test]
    fn timestamp_image_recency() {
        let t = timestamp_image(&window(vec![pos(0, 0, 500)]));
        assert_eq!(t.get(0, 0, 0), 0.5);
        let t = timestamp_image(&window(vec![pos(0, 0, 200), pos(0, 0, 700)]));
        assert_eq!(t.get(0, 0, 0), 0.7);
        assert_eq!(t.get(0, 0, 1), 0.0);
    }

    #[test]
    fn time_surface_analytic_points() {
        let g = geom();
        let w = EventWindow::new(vec![pos(0, 0, 1_999_999)], 1_000_000, 2_000_000, g).unwrap();
        let s = time_surface(&w, 1_000_000).unwrap();
        assert!((s.get(0, 0, 0) - 1.0).abs() < 1e-5);
        let w = EventWindow::new(vec![neg(1, 0, 1_000)], 0, 3_000, g).unwrap();
        let s = time_surface(&w, 2_000).unwrap();
        assert!((s.get(0, 1, 1) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((s.get(0, 1, 1) - 0.367879).abs() < 1e-6);
        assert!(time_surface(&w, 0).is_err());
    }

    #[test]
    fn ev_segnet_stats_mean_and_std() {
        let s = ev_segnet_stats(&window(vec![neg(3, 2, 100), pos(0, 0, 200), pos(0, 0, 400)]));
        assert_eq!(s.get(0, 0, 0), 2.0);
        assert!((s.get(0, 0, 1) - 0.3).abs() < 1e-15);
        assert!((s.get(0, 0, 2) - 0.1).abs() < 1e-12);
        assert_eq!(s.get(2, 3, 3), 1.0);
        assert_eq!(s.get(2, 3, 5), 0.0);
    }

    #[test]
    fn voxel_grid_bin_weights() {
        // B = 5 over 1000 us: bin centres at t = 0, 250, 500, 750, 1000
        let v = voxel_grid(&window(vec![pos(0, 0, 250)]), 5).unwrap();
        assert_eq!(v.get(0, 0, 1), 1.0);
        assert_eq!(v.data().iter().filter(|&&x| x != 0.0).count(), 1);
        let v = voxel_grid(&window(vec![neg(0, 0, 125)]), 5).unwrap();
        assert_eq!(v.get(0, 0, 0), -0.5);
        assert_eq!(v.get(0, 0, 1), -0.5);
        assert!(voxel_grid(&window(vec![]), 0).is_err());
    }

    #[test]
    fn unknown_kind_lists_valid_names() {
        let err = "bogus".parse::<ReprKind>().unwrap_err().to_string();
        for k in ReprKind::ALL {
            assert!(err.contains(k.name()));
        }
    }

    #[test]
    fn gtn1_layout() {
        let g = GridTensor::from_data(1, 2, 1, vec![1.5, -2.0], None).unwrap();
        let bytes = g.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"GTN1");
        assert_eq!(&bytes[4..10], &[1, 0, 2, 0, 1, 0]);
        assert_eq!(&bytes[10..14], &1.5f32.to_le_bytes());
        assert_eq!(GridTensor::from_bytes(&bytes).unwrap(), g);
        assert!(GridTensor::from_bytes(&bytes[..12]).is_err());
    }
}
