use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::event::{generate_synthetic, MovingBox, Polarity, SceneSpec, SensorGeometry, SyntheticSequence};

/// Box side per class of the standard benchmark.
pub const CLASS_SIDES: [f64; 2] = [8.0, 16.0];

/// Parameters of the seeded two-class benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub size: u16,
    pub windows: usize,
    pub window_us: u64,
    pub train: usize,
    pub test: usize,
    pub max_boxes: usize,
    /// Chance that a box holds still for a few windows, emitting no events.
    pub pause_probability: f64,
    /// Shortest and longest pause, in windows.
    pub pause_windows: (u64, u64),
    pub threshold: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            size: 64,
            windows: 10,
            window_us: 50_000,
            train: 50,
            test: 10,
            max_boxes: 2,
            pause_probability: 1.0,
            pause_windows: (2, 5),
            threshold: 0.2,
            noise_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<SyntheticSequence>,
    pub test: Vec<SyntheticSequence>,
}

fn random_box(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> MovingBox {
    let class_id: u16 = rng.gen_range(0..CLASS_SIDES.len() as u16);
    let side = CLASS_SIDES[usize::from(class_id)];
    let room = f64::from(spec.size) - side;
    let duration = spec.windows as f64 * spec.window_us as f64 * 1e-6;
    let speed_cap = 0.9 * room / duration;
    let axis = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.gen_range(40.0..160.0f64).min(speed_cap) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let travel = v * duration;
        // start so that the whole path stays on the sensor
        let lo = (-travel).max(0.0);
        let hi = (room - travel).min(room);
        (rng.gen_range(lo..=hi.max(lo)), v)
    };
    let (x, vx) = axis(rng);
    let (y, vy) = axis(rng);
    let mut pauses = Vec::new();
    if spec.windows >= 6 && rng.gen_bool(spec.pause_probability) {
        let start = rng.gen_range(2..spec.windows - 3) as u64;
        let (lo, hi) = spec.pause_windows;
        let len = rng.gen_range(lo..=hi.max(lo)).min(spec.windows as u64 - start);
        pauses.push((start * spec.window_us, (start + len) * spec.window_us));
    }
    MovingBox {
        x,
        y,
        width: side,
        height: side,
        vx,
        vy,
        contrast: if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
        class_id,
        pauses,
    }
}

/// One random scene of the benchmark distribution.
pub fn benchmark_scene(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.gen_range(1..=spec.max_boxes.max(1));
    SceneSpec {
        geometry: SensorGeometry::new(spec.size, spec.size).expect("non-zero size"),
        boxes: (0..n).map(|_| random_box(spec, rng)).collect(),
        duration_us: spec.windows as u64 * spec.window_us,
        threshold: spec.threshold,
        noise_rate: spec.noise_rate,
        seed: rng.gen(),
    }
}

/// Seeded train/test split; the same spec always yields the same data.
pub fn standard_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize| -> Result<Vec<SyntheticSequence>> {
        (0..n)
            .map(|_| generate_synthetic(&benchmark_scene(spec, &mut rng), spec.window_us))
            .collect()
    };
    let train = make(spec.train)?;
    let test = make(spec.test)?;
    Ok(Benchmark { train, test })
}

/// Single bright box crossing a 64x64 sensor over 20 windows.
pub fn overfit_sequence(seed: u64) -> Result<SyntheticSequence> {
    let spec = SceneSpec {
        geometry: SensorGeometry::new(64, 64)?,
        boxes: vec![MovingBox {
            x: 8.0,
            y: 20.0,
            width: 16.0,
            height: 16.0,
            vx: 30.0,
            vy: 10.0,
            contrast: Polarity::Positive,
            class_id: 0,
            pauses: vec![],
        }],
        duration_us: 20 * 50_000,
        threshold: 0.2,
        noise_rate: 0.5,
        seed,
    };
    generate_synthetic(&spec, 50_000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_stay_on_sensor_and_classes_match_sizes() {
        let spec = BenchmarkSpec { train: 30, test: 5, ..BenchmarkSpec::default() };
        let b = standard_benchmark(&spec).unwrap();
        assert_eq!((b.train.len(), b.test.len()), (30, 5));
        let mut paused_windows = 0;
        for seq in b.train.iter().chain(&b.test) {
            assert_eq!(seq.windows.len(), 10);
            for gts in &seq.ground_truth {
                assert!(!gts.is_empty());
                for g in gts {
                    let side = CLASS_SIDES[usize::from(g.class_id)] as u16;
                    assert_eq!((g.x_max - g.x_min, g.y_max - g.y_min), (side, side));
                }
            }
            let boxes = |k: usize| seq.ground_truth[k].iter().map(|g| g.bbox()).collect::<Vec<_>>();
            paused_windows += (1..seq.windows.len()).filter(|&k| boxes(k) == boxes(k - 1)).count();
        }
        assert!(paused_windows > 0);
    }

    #[test]
    fn benchmark_is_deterministic() {
        let spec = BenchmarkSpec { train: 3, test: 1, ..BenchmarkSpec::default() };
        let (a, b) = (standard_benchmark(&spec).unwrap(), standard_benchmark(&spec).unwrap());
        assert_eq!(a.train[2].events(), b.train[2].events());
        assert_eq!(a.test[0].ground_truth, b.test[0].ground_truth);
    }

    #[test]
    fn overfit_sequence_shape() {
        let s = overfit_sequence(0).unwrap();
        assert_eq!(s.windows.len(), 20);
        assert!(s.ground_truth.iter().all(|g| g.len() == 1));
    }
}
