//! Structural half of the learned pillar representation: bucket one
//! polarity's events into `(cell, time slice)` pillars, cap each pillar by
//! seeded reservoir sampling, keep the most populated pillars, and augment
//! every retained event with its offset from the pillar mean.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::{Event, EventWindow, Polarity};

/// Raw per-event features `(x, y, t_norm)`.
pub const RAW_FEATURES: usize = 3;
/// Augmented features `(x, y, t, x - x_c, y - y_c, t - t_c)`.
pub const AUGMENTED_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PillarConfig {
    /// Maximum retained events per pillar (M).
    pub max_events: usize,
    /// Maximum number of non-empty pillars (K).
    pub max_pillars: usize,
    /// Temporal slices per window (D).
    pub time_slices: usize,
    /// Square cell edge in pixels.
    pub cell_size: usize,
    pub seed: u64,
}

impl Default for PillarConfig {
    fn default() -> Self {
        Self {
            max_events: 5,
            max_pillars: 100_000,
            time_slices: 1,
            cell_size: 1,
            seed: 0,
        }
    }
}

impl PillarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_events == 0 || self.max_pillars == 0 || self.time_slices == 0 || self.cell_size == 0 {
            return Err(Error::Config(format!(
                "pillar config needs M, K, D and cell size >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Populated pillars of one polarity. Only the populated rows are stored;
/// the conceptual `K x M x C` tensor is zero everywhere else (see
/// [`PillarSet::to_dense`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    polarity: Polarity,
    capacity: usize,
    max_events: usize,
    channels: usize,
    grid: (usize, usize, usize),
    features: Vec<f64>,
    coords: Vec<[u32; 3]>,
    counts: Vec<usize>,
    source_events: usize,
    source_pillars: usize,
}

impl PillarSet {
    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    /// K.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// M.
    pub fn max_events(&self) -> usize {
        self.max_events
    }

    /// C: 3 before augmentation, 6 after.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_augmented(&self) -> bool {
        self.channels == AUGMENTED_FEATURES
    }

    /// `(cells_x, cells_y, slices)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `(x_cell, y_cell, slice)` per populated pillar, sorted by `(slice, y, x)`.
    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Populated rows, `len() x M x C`.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Feature vector of slot `m` in pillar `k`.
    pub fn slot(&self, k: usize, m: usize) -> &[f64] {
        let c = self.channels;
        let base = (k * self.max_events + m) * c;
        &self.features[base..base + c]
    }

    /// The full zero-padded `K x M x C` tensor. Allocates `K * M * C` values.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.capacity * self.max_events * self.channels];
        out[..self.features.len()].copy_from_slice(&self.features);
        out
    }

    /// Retained slots gathered into a contiguous `N x C` matrix, plus the
    /// pillar-start offsets (length `len() + 1`).
    pub fn gather_slots(&self) -> (Vec<f64>, Vec<usize>) {
        let c = self.channels;
        let total: usize = self.counts.iter().sum();
        let mut rows = Vec::with_capacity(total * c);
        let mut offsets = Vec::with_capacity(self.counts.len() + 1);
        offsets.push(0);
        for (k, &n) in self.counts.iter().enumerate() {
            let base = k * self.max_events * c;
            rows.extend_from_slice(&self.features[base..base + n * c]);
            offsets.push(offsets.last().copied().unwrap_or(0) + n);
        }
        (rows, offsets)
    }

    /// `k,x,y,d,count` lines for populated pillars.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, (c, n)) in self.coords.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{k},{},{},{},{n}", c[0], c[1], c[2]);
        }
        out
    }
}

/// Assigns events of `polarity` to pillars. Raw slot features are
/// `(x, y, t_norm)` with `t_norm = (t - t_start) / duration`.
pub fn build_pillars(
    window: &EventWindow,
    config: &PillarConfig,
    polarity: Polarity,
) -> Result<PillarSet> {
    config.validate()?;
    let geom = window.geometry();
    let cs = config.cell_size;
    let (cx, cy, slices) = (
        geom.width().div_ceil(cs),
        geom.height().div_ceil(cs),
        config.time_slices,
    );
    let m = config.max_events;
    let duration = window.duration();
    let polarity_salt = match polarity {
        Polarity::Positive => 0x5851_f42d_4c95_7f2d,
        Polarity::Negative => 0x1405_7b7e_f767_814f,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ polarity_salt);

    let mut lookup = vec![u32::MAX; cx * cy * slices];
    let mut keys: Vec<[u32; 3]> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    let mut slots: Vec<Event> = Vec::new();
    let mut source_events = 0;
    for e in window.events().iter().filter(|e| e.p == polarity) {
        source_events += 1;
        let d = (((e.t - window.t_start()) as u128 * slices as u128) / duration as u128) as usize;
        let d = d.min(slices - 1);
        let (xc, yc) = (usize::from(e.x) / cs, usize::from(e.y) / cs);
        let cell = (d * cy + yc) * cx + xc;
        let k = if lookup[cell] == u32::MAX {
            let k = keys.len();
            lookup[cell] = k as u32;
            keys.push([xc as u32, yc as u32, d as u32]);
            seen.push(0);
            slots.resize(slots.len() + m, *e);
            k
        } else {
            lookup[cell] as usize
        };
        let n = seen[k];
        if n < m {
            slots[k * m + n] = *e;
        } else {
            let j = rng.gen_range(0..=n);
            if j < m {
                slots[k * m + j] = *e;
            }
        }
        seen[k] = n + 1;
    }

    let source_pillars = keys.len();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    if order.len() > config.max_pillars {
        order.sort_by(|&a, &b| {
            seen[b]
                .cmp(&seen[a])
                .then_with(|| (keys[a][2], keys[a][1], keys[a][0]).cmp(&(keys[b][2], keys[b][1], keys[b][0])))
        });
        order.truncate(config.max_pillars);
    }
    order.sort_by_key(|&k| (keys[k][2], keys[k][1], keys[k][0]));

    let c = RAW_FEATURES;
    let mut features = vec![0.0; order.len() * m * c];
    let mut coords = Vec::with_capacity(order.len());
    let mut counts = Vec::with_capacity(order.len());
    let mut retained: Vec<Event> = Vec::with_capacity(m);
    for (row, &k) in order.iter().enumerate() {
        let n = seen[k].min(m);
        retained.clear();
        retained.extend_from_slice(&slots[k * m..k * m + n]);
        retained.sort_by_key(|e| (e.t, e.y, e.x));
        for (s, e) in retained.iter().enumerate() {
            let base = (row * m + s) * c;
            features[base] = f64::from(e.x);
            features[base + 1] = f64::from(e.y);
            features[base + 2] = window.normalized_time(e.t);
        }
        coords.push(keys[k]);
        counts.push(n);
    }

    Ok(PillarSet {
        polarity,
        capacity: config.max_pillars,
        max_events: m,
        channels: c,
        grid: (cx, cy, slices),
        features,
        coords,
        counts,
        source_events,
        source_pillars,
    })
}

/// Extends each retained slot with its offset from the pillar's mean
/// `(x_c, y_c, t_c)`. Empty slots stay zero.
pub fn augment(set: &PillarSet) -> Result<PillarSet> {
    if set.channels != RAW_FEATURES {
        return Err(Error::State("pillar set is already augmented".into()));
    }
    let m = set.max_events;
    let c = AUGMENTED_FEATURES;
    let mut features = vec![0.0; set.len() * m * c];
    for (k, &n) in set.counts.iter().enumerate() {
        let mut mean = [0.0; RAW_FEATURES];
        for s in 0..n {
            for (acc, v) in mean.iter_mut().zip(set.slot(k, s)) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        for s in 0..n {
            let raw = set.slot(k, s);
            let base = (k * m + s) * c;
            for j in 0..RAW_FEATURES {
                features[base + j] = raw[j];
                features[base + RAW_FEATURES + j] = raw[j] - mean[j];
            }
        }
    }
    Ok(PillarSet {
        channels: c,
        features,
        ..set.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PillarStats {
    pub pillars: usize,
    pub retained_events: usize,
    /// Events of this polarity not retained (per-pillar cap or pillar cap).
    pub dropped_events: usize,
    pub dropped_pillars: usize,
}

pub fn pillar_stats(set: &PillarSet) -> PillarStats {
    let retained: usize = set.counts.iter().sum();
    PillarStats {
        pillars: set.len(),
        retained_events: retained,
        dropped_events: set.source_events - retained,
        dropped_pillars: set.source_pillars - set.len(),
    }
}
