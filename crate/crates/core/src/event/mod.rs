//! Event data model: the `(x, y, t, p)` record emitted by an event camera,
//! sensor geometry, fixed-length time windows, file I/O and a synthetic
//! moving-box scene generator.

mod io;
mod scene;
mod synth;
mod window;

pub use io::{parse_event_file, read_gt_file, write_event_file, write_gt_file, EventFormat};
pub use synth::{generate_synthetic, GroundTruthBox, MovingBox, SceneSpec, SyntheticSequence};
pub use window::{slice_windows, slice_windows_from, EventWindow};

use crate::error::{Error, Result};

/// Sign of a log-intensity change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.sign())
    }

    pub fn from_sign(p: i64) -> Result<Self> {
        match p {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::Value(format!(
                "polarity must be -1 or 1, got {other}"
            ))),
        }
    }
}

/// One sensor measurement. Timestamps are integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Sensor resolution, `W` columns by `H` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    width: u16,
    height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Value(format!(
                "sensor geometry must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        usize::from(self.width)
    }

    pub fn height(&self) -> usize {
        usize::from(self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, ev: &Event) -> bool {
        ev.x < self.width && ev.y < self.height
    }
}

/// Checks the per-event invariants and stream ordering.
pub fn validate_stream(events: &[Event], geometry: SensorGeometry) -> Result<()> {
    let mut prev = 0u64;
    for (i, ev) in events.iter().enumerate() {
        if !geometry.contains(ev) {
            return Err(Error::Value(format!(
                "event {} at ({}, {}) lies outside {}x{} sensor",
                i + 1,
                ev.x,
                ev.y,
                geometry.width(),
                geometry.height()
            )));
        }
        if ev.t < prev {
            return Err(Error::Value(format!(
                "event {} has timestamp {} before previous {}",
                i + 1,
                ev.t,
                prev
            )));
        }
        prev = ev.t;
    }
    Ok(())
}
