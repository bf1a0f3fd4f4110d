use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::window::slice_windows_from;
use super::{Event, EventWindow, Polarity, SensorGeometry};
use crate::error::{Error, Result};
use crate::eval::BBox;

const BACKGROUND_LEVEL: f64 = 0.3;
const BRIGHT_LEVEL: f64 = 0.7;
const DARK_LEVEL: f64 = 0.1;
/// Rendered micro-frames per window.
const FRAMES_PER_WINDOW: u64 = 10;

/// An axis-aligned rectangle translating at constant velocity, optionally
/// holding still during `pauses` (half-open `[start, end)` intervals in µs).
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Pixels per second.
    pub vx: f64,
    pub vy: f64,
    /// `Positive` renders brighter than the background, `Negative` darker.
    pub contrast: Polarity,
    pub class_id: u16,
    pub pauses: Vec<(u64, u64)>,
}

impl MovingBox {
    fn moving_time_us(&self, t: u64) -> u64 {
        let paused: u64 = self
            .pauses
            .iter()
            .map(|&(a, b)| b.min(t).saturating_sub(a.min(t)))
            .sum();
        t - paused.min(t)
    }

    /// Top-left corner at time `t`.
    pub fn position(&self, t: u64) -> (f64, f64) {
        let s = self.moving_time_us(t) as f64 * 1e-6;
        (self.x + self.vx * s, self.y + self.vy * s)
    }

    fn level(&self) -> f64 {
        match self.contrast {
            Polarity::Positive => BRIGHT_LEVEL,
            Polarity::Negative => DARK_LEVEL,
        }
    }
}

/// Everything needed to render a deterministic synthetic recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: SensorGeometry,
    pub boxes: Vec<MovingBox>,
    pub duration_us: u64,
    /// Log-intensity step that triggers an event.
    pub threshold: f64,
    /// Background activity, events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Value(format!(
                "contrast threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.noise_rate >= 0.0) {
            return Err(Error::Value("noise rate must be non-negative".into()));
        }
        if self.duration_us == 0 {
            return Err(Error::Value("scene duration must be positive".into()));
        }
        let (w, h) = (self.geometry.width() as f64, self.geometry.height() as f64);
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.width > 0.0 && b.height > 0.0) {
                return Err(Error::Value(format!("box {i} has non-positive size")));
            }
            if b.x < 0.0 || b.y < 0.0 || b.x + b.width > w || b.y + b.height > h {
                return Err(Error::Value(format!(
                    "box {i} does not start inside the {}x{} sensor",
                    self.geometry.width(),
                    self.geometry.height()
                )));
            }
        }
        Ok(())
    }
}

/// A labelled box in integer pixel coordinates, `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruthBox {
    pub window: usize,
    pub class_id: u16,
    pub x_min: u16,
    pub y_min: u16,
    pub x_max: u16,
    pub y_max: u16,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            f64::from(self.x_min),
            f64::from(self.y_min),
            f64::from(self.x_max),
            f64::from(self.y_max),
        )
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub geometry: SensorGeometry,
    pub windows: Vec<EventWindow>,
    /// One list per window, labelled at the window's end time.
    pub ground_truth: Vec<Vec<GroundTruthBox>>,
}

impl SyntheticSequence {
    pub fn events(&self) -> Vec<Event> {
        self.windows
            .iter()
            .flat_map(|w| w.events().iter().copied())
            .collect()
    }

    pub fn flat_ground_truth(&self) -> Vec<GroundTruthBox> {
        self.ground_truth.iter().flatten().copied().collect()
    }
}

/// Renders the scene as a piecewise-constant intensity image and emits an
/// event each time a pixel's log intensity moves a full threshold step away
/// from its last reference level.
///
/// The reference starts at the empty background, so boxes present at `t = 0`
/// produce an initial burst of events in the first window.
pub fn generate_synthetic(spec: &SceneSpec, delta: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    if delta == 0 {
        return Err(Error::Value("window length must be positive".into()));
    }
    let geometry = spec.geometry;
    let (w, h) = (geometry.width(), geometry.height());
    let step = (delta / FRAMES_PER_WINDOW).max(1);
    let n_windows = spec.duration_us.div_ceil(delta) as usize;
    let end = n_windows as u64 * delta;

    let mut reference = vec![BACKGROUND_LEVEL.ln(); w * h];
    let mut previous = reference.clone();
    let mut current = vec![0.0; w * h];
    let mut events = Vec::new();
    let mut frame_events = Vec::new();
    let mut t_prev = 0u64;
    let mut t = 0u64;
    while t < end {
        render_log_intensity(spec, t, &mut current);
        frame_events.clear();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (l_prev, l_new) = (previous[i], current[i]);
                let diff = l_new - l_prev;
                while (l_new - reference[i]).abs() >= spec.threshold {
                    let sign = (l_new - reference[i]).signum();
                    reference[i] += sign * spec.threshold;
                    let frac = if diff != 0.0 {
                        ((reference[i] - l_prev) / diff).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let te = t_prev + (frac * (t - t_prev) as f64) as u64;
                    let p = if sign > 0.0 {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    frame_events.push(Event::new(x as u16, y as u16, te, p));
                }
            }
        }
        frame_events.sort_by_key(|e| e.t);
        events.extend_from_slice(&frame_events);
        std::mem::swap(&mut previous, &mut current);
        t_prev = t;
        t += step;
    }

    if spec.noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let rate_per_us = spec.noise_rate * geometry.pixels() as f64 * 1e-6;
        let mut noise = Vec::new();
        let mut tn = 0.0f64;
        loop {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            tn += -u.ln() / rate_per_us;
            if tn >= end as f64 {
                break;
            }
            let p = if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            noise.push(Event::new(
                rng.gen_range(0..w) as u16,
                rng.gen_range(0..h) as u16,
                tn as u64,
                p,
            ));
        }
        events.extend(noise);
        // stable: signal events precede noise at equal timestamps
        events.sort_by_key(|e| e.t);
    }

    let windows = slice_windows_from(&events, geometry, 0, delta, n_windows)?;
    let ground_truth = (0..n_windows)
        .map(|k| label_boxes(spec, k, (k as u64 + 1) * delta))
        .collect();
    Ok(SyntheticSequence {
        geometry,
        windows,
        ground_truth,
    })
}

fn render_log_intensity(spec: &SceneSpec, t: u64, out: &mut [f64]) {
    let w = spec.geometry.width();
    let h = spec.geometry.height();
    out.fill(BACKGROUND_LEVEL.ln());
    for b in &spec.boxes {
        let (x0, y0) = b.position(t);
        let level = b.level().ln();
        // pixel centres inside [x0, x0 + width) x [y0, y0 + height)
        let xs = (x0 - 0.5).ceil().max(0.0) as i64;
        let xe = ((x0 + b.width - 0.5).ceil() as i64).min(w as i64);
        let ys = (y0 - 0.5).ceil().max(0.0) as i64;
        let ye = ((y0 + b.height - 0.5).ceil() as i64).min(h as i64);
        for y in ys.max(0)..ye {
            for x in xs.max(0)..xe {
                out[y as usize * w + x as usize] = level;
            }
        }
    }
}

fn label_boxes(spec: &SceneSpec, window: usize, t: u64) -> Vec<GroundTruthBox> {
    let w = spec.geometry.width() as f64;
    let h = spec.geometry.height() as f64;
    spec.boxes
        .iter()
        .filter_map(|b| {
            let (x0, y0) = b.position(t);
            let x_min = x0.round().clamp(0.0, w);
            let x_max = (x0 + b.width).round().clamp(0.0, w);
            let y_min = y0.round().clamp(0.0, h);
            let y_max = (y0 + b.height).round().clamp(0.0, h);
            (x_min < x_max && y_min < y_max).then(|| GroundTruthBox {
                window,
                class_id: b.class_id,
                x_min: x_min as u16,
                y_min: y_min as u16,
                x_max: x_max as u16,
                y_max: y_max as u16,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(boxes: Vec<MovingBox>, noise_rate: f64) -> SceneSpec {
        SceneSpec {
            geometry: SensorGeometry::new(32, 24).unwrap(),
            boxes,
            duration_us: 250_000,
            threshold: 0.2,
            noise_rate,
            seed: 3,
        }
    }

    fn moving(vx: f64, contrast: Polarity) -> MovingBox {
        MovingBox {
            x: 4.0,
            y: 6.0,
            width: 8.0,
            height: 8.0,
            vx,
            vy: 0.0,
            contrast,
            class_id: 0,
            pauses: vec![],
        }
    }

    #[test]
    fn static_box_only_fires_in_first_window() {
        let seq = generate_synthetic(&scene(vec![moving(0.0, Polarity::Positive)], 0.0), 50_000)
            .unwrap();
        assert_eq!(seq.windows.len(), 5);
        assert!(!seq.windows[0].is_empty());
        assert!(seq.windows[1..].iter().all(|w| w.is_empty()));
        // every box pixel fires floor(ln(0.7/0.3)/0.2) = 4 positive events
        assert_eq!(seq.windows[0].len(), 64 * 4);
        assert!(seq.windows[0].events().iter().all(|e| e.p == Polarity::Positive));
    }

    /// Renders micro-frames independently and checks that every event after
    /// the first window matches the sign of the brightness change at its pixel.
    #[test]
    fn moving_box_polarity_matches_brightness_difference() {
        let spec = scene(vec![moving(80.0, Polarity::Positive)], 0.0);
        let seq = generate_synthetic(&spec, 50_000).unwrap();
        let (w, h) = (32usize, 24usize);
        let step = 5_000u64;
        let mut leading = 0;
        let mut trailing = 0;
        for win in &seq.windows[1..] {
            for e in win.events() {
                let frame_t = e.t.div_ceil(step) * step;
                let frame_t = if frame_t == e.t { e.t + step } else { frame_t };
                // the event belongs to the frame pair (frame_t - step, frame_t)
                // unless it sits exactly on a frame boundary
                let candidates = [(frame_t - step, frame_t), (e.t.saturating_sub(step), e.t)];
                let mut ok = false;
                for (a, b) in candidates {
                    let mut fa = vec![0.0; w * h];
                    let mut fb = vec![0.0; w * h];
                    render_log_intensity(&spec, a, &mut fa);
                    render_log_intensity(&spec, b, &mut fb);
                    let i = e.y as usize * w + e.x as usize;
                    let d = fb[i] - fa[i];
                    if d != 0.0 && (d > 0.0) == (e.p == Polarity::Positive) {
                        ok = true;
                        let (x0, _) = spec.boxes[0].position(b);
                        let centre = x0 + 4.0;
                        if e.p == Polarity::Positive {
                            assert!(f64::from(e.x) + 0.5 > centre, "{e:?}");
                            leading += 1;
                        } else {
                            assert!(f64::from(e.x) + 0.5 < centre, "{e:?}");
                            trailing += 1;
                        }
                        break;
                    }
                }
                assert!(ok, "event {e:?} does not match a brightness change");
            }
        }
        assert!(leading > 0 && trailing > 0);
    }

    #[test]
    fn negative_contrast_flips_edges() {
        let seq = generate_synthetic(&scene(vec![moving(80.0, Polarity::Negative)], 0.0), 50_000)
            .unwrap();
        let evs = seq.windows[2].events();
        let max_pos_x = evs.iter().filter(|e| e.p == Polarity::Positive).map(|e| e.x).max();
        let min_neg_x = evs.iter().filter(|e| e.p == Polarity::Negative).map(|e| e.x).min();
        // darker box moving right: leading edge darkens, trailing edge brightens
        assert!(max_pos_x.unwrap() < min_neg_x.unwrap());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = scene(vec![moving(60.0, Polarity::Positive)], 5.0);
        let a = generate_synthetic(&spec, 50_000).unwrap();
        let b = generate_synthetic(&spec, 50_000).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(a.events(), generate_synthetic(&other, 50_000).unwrap().events());
    }

    #[test]
    fn ground_truth_tracks_box_at_window_end() {
        let seq = generate_synthetic(&scene(vec![moving(40.0, Polarity::Positive)], 0.0), 50_000)
            .unwrap();
        // 40 px/s over 50 ms = 2 px per window
        let gt = &seq.ground_truth;
        assert_eq!(gt[0][0].x_min, 6);
        assert_eq!(gt[1][0].x_min, 8);
        assert_eq!(gt[0][0].x_max - gt[0][0].x_min, 8);
        assert_eq!(gt[0][0].y_min, 6);
    }

    #[test]
    fn box_leaving_frame_dropped_from_gt() {
        let mut b = moving(200.0, Polarity::Positive);
        b.x = 20.0;
        let seq = generate_synthetic(&scene(vec![b], 0.0), 50_000).unwrap();
        assert_eq!(seq.ground_truth[0].len(), 1);
        assert_eq!(seq.ground_truth[0][0].x_min, 30);
        // at 200 px/s the box is clipped at 50 ms and gone by 100 ms
        assert!(seq.ground_truth[1].is_empty());
        let last = seq.ground_truth[0][0];
        assert_eq!(last.x_max, 32);
    }

    #[test]
    fn pauses_freeze_motion() {
        let mut b = moving(100.0, Polarity::Positive);
        b.pauses = vec![(50_000, 150_000)];
        let seq = generate_synthetic(&scene(vec![b], 0.0), 50_000).unwrap();
        assert!(seq.windows[2].is_empty());
        assert!(!seq.windows[3].is_empty());
        assert_eq!(seq.ground_truth[1][0], GroundTruthBox { window: 1, ..seq.ground_truth[2][0] });
    }

    #[test]
    fn generated_events_satisfy_invariants() {
        let mut spec = scene(
            vec![moving(60.0, Polarity::Positive), moving(-30.0, Polarity::Negative)],
            200.0,
        );
        spec.boxes[1].x = 20.0;
        spec.duration_us = 1_000_000;
        let seq = generate_synthetic(&spec, 50_000).unwrap();
        let evs = seq.events();
        assert!(evs.len() > 10_000);
        crate::event::validate_stream(&evs, spec.geometry).unwrap();
    }

    #[test]
    fn invalid_threshold_rejected() {
        let mut spec = scene(vec![], 0.0);
        spec.threshold = 0.0;
        assert!(generate_synthetic(&spec, 50_000).is_err());
    }
}
