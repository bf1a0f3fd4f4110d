//! Events-per-second measurement for the representations and pillar building.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::{Event, EventWindow, Polarity, SensorGeometry};
use crate::pillars::{build_pillars, PillarConfig};
use crate::repr::{ReprConfig, ReprKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchTarget {
    Repr(ReprKind),
    /// Both polarities through `build_pillars`.
    BuildPillars,
}

impl BenchTarget {
    pub fn all() -> Vec<BenchTarget> {
        let mut v: Vec<BenchTarget> = ReprKind::ALL.iter().map(|&k| BenchTarget::Repr(k)).collect();
        v.push(BenchTarget::BuildPillars);
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchTarget::Repr(k) => k.name(),
            BenchTarget::BuildPillars => "build_pillars",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        BenchTarget::all().into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = BenchTarget::all().iter().map(|t| t.name()).collect();
            Error::Value(format!("unknown benchmark target `{s}`; valid targets: {}", names.join(", ")))
        })
    }

    /// One pass over the window; returns a value derived from the output so
    /// the work cannot be optimized away.
    pub fn run(self, window: &EventWindow, repr: &ReprConfig, pillars: &PillarConfig) -> Result<f64> {
        match self {
            BenchTarget::Repr(kind) => {
                let t = ReprConfig { kind, ..*repr }.compute(window)?;
                Ok(t.data().first().copied().unwrap_or(0.0))
            }
            BenchTarget::BuildPillars => {
                let p = build_pillars(window, pillars, Polarity::Positive)?;
                let n = build_pillars(window, pillars, Polarity::Negative)?;
                Ok((p.len() + n.len()) as f64)
            }
        }
    }
}

/// Uniformly random events over `duration_us`, sorted by time.
pub fn random_window(count: usize, geometry: SensorGeometry, duration_us: u64, seed: u64) -> Result<EventWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts: Vec<u64> = (0..count).map(|_| rng.gen_range(0..duration_us)).collect();
    ts.sort_unstable();
    let (w, h) = (geometry.width() as u16, geometry.height() as u16);
    let events = ts
        .into_iter()
        .map(|t| {
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..w), rng.gen_range(0..h), t, p)
        })
        .collect();
    EventWindow::new(events, 0, duration_us, geometry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub target: &'static str,
    pub events: usize,
    /// Fastest of the timed repetitions.
    pub best_seconds: f64,
    pub events_per_sec: f64,
}

/// One warm-up pass, then the best of `repeats` timed passes.
pub fn measure(
    target: BenchTarget,
    window: &EventWindow,
    repr: &ReprConfig,
    pillars: &PillarConfig,
    repeats: usize,
) -> Result<Throughput> {
    let mut sink = target.run(window, repr, pillars)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        sink += target.run(window, repr, pillars)?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    let best = best.max(1e-9);
    Ok(Throughput {
        target: target.name(),
        events: window.len(),
        best_seconds: best,
        events_per_sec: window.len() as f64 / best,
    })
}
