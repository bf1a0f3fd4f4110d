use super::{Event, SensorGeometry};
use crate::error::{Error, Result};

/// Events falling in the half-open interval `[t_start, t_end)`, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    events: Vec<Event>,
    t_start: u64,
    t_end: u64,
    geometry: SensorGeometry,
}

impl EventWindow {
    pub fn new(
        events: Vec<Event>,
        t_start: u64,
        t_end: u64,
        geometry: SensorGeometry,
    ) -> Result<Self> {
        if t_end <= t_start {
            return Err(Error::Value(format!(
                "window end {t_end} must exceed start {t_start}"
            )));
        }
        let mut prev = t_start;
        for ev in &events {
            if ev.t < prev || ev.t >= t_end {
                return Err(Error::Value(format!(
                    "event at t={} violates window [{t_start}, {t_end}) or ordering",
                    ev.t
                )));
            }
            if !geometry.contains(ev) {
                return Err(Error::Value(format!(
                    "event ({}, {}) outside sensor",
                    ev.x, ev.y
                )));
            }
            prev = ev.t;
        }
        Ok(Self {
            events,
            t_start,
            t_end,
            geometry,
        })
    }

    pub fn empty(t_start: u64, t_end: u64, geometry: SensorGeometry) -> Result<Self> {
        Self::new(Vec::new(), t_start, t_end, geometry)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    /// Window length in microseconds.
    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time normalized to `[0, 1)` within the window.
    pub fn normalized_time(&self, t: u64) -> f64 {
        (t - self.t_start) as f64 / self.duration() as f64
    }

    /// Same window with a different event list (used for ablations such as
    /// dropping one polarity). The replacement must satisfy the invariants.
    pub fn with_events(&self, events: Vec<Event>) -> Result<Self> {
        Self::new(events, self.t_start, self.t_end, self.geometry)
    }
}

/// Splits a sorted stream into consecutive windows of `delta` microseconds
/// starting at the first event's timestamp. The trailing partial window is
/// kept; an empty stream yields no windows.
pub fn slice_windows(
    stream: &[Event],
    geometry: SensorGeometry,
    delta: u64,
) -> Result<Vec<EventWindow>> {
    if delta == 0 {
        return Err(Error::Value("window length must be positive".into()));
    }
    let Some(first) = stream.first() else {
        return Ok(Vec::new());
    };
    let last = stream.last().expect("non-empty").t;
    let count = ((last - first.t) / delta + 1) as usize;
    slice_windows_from(stream, geometry, first.t, delta, count)
}

/// Like [`slice_windows`] but with an explicit origin and window count;
/// events outside `[t0, t0 + count * delta)` are discarded.
pub fn slice_windows_from(
    stream: &[Event],
    geometry: SensorGeometry,
    t0: u64,
    delta: u64,
    count: usize,
) -> Result<Vec<EventWindow>> {
    if delta == 0 {
        return Err(Error::Value("window length must be positive".into()));
    }
    if stream.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::Value("stream is not sorted by timestamp".into()));
    }
    let mut windows = Vec::with_capacity(count);
    let mut lo = stream.partition_point(|e| e.t < t0);
    for k in 0..count as u64 {
        let t_start = t0 + k * delta;
        let t_end = t_start + delta;
        let hi = lo + stream[lo..].partition_point(|e| e.t < t_end);
        windows.push(EventWindow::new(
            stream[lo..hi].to_vec(),
            t_start,
            t_end,
            geometry,
        )?);
        lo = hi;
    }
    Ok(windows)
}
