use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use evpk_core::detector::{bind_state, overfit_sequence, Detector, DetectorConfig, DetectorState, MemoryVariant, INFERENCE_MODE};
use evpk_core::event::SensorGeometry;
use evpk_core::nn::Graph;
use evpk_core::pillars::PillarConfig;
use evpk_core::repr::{ReprConfig, ReprKind};
use evpk_core::throughput::{random_window, BenchTarget};

fn representations(c: &mut Criterion) {
    let geometry = SensorGeometry::new(304, 240).unwrap();
    let window = random_window(200_000, geometry, 50_000, 0).unwrap();
    let repr = ReprConfig::new(ReprKind::VoxelGrid);
    let pillars = PillarConfig::default();
    let mut group = c.benchmark_group("events");
    group.throughput(Throughput::Elements(window.len() as u64));
    group.sample_size(10);
    for target in BenchTarget::all() {
        group.bench_function(BenchmarkId::from_parameter(target.name()), |b| {
            b.iter(|| target.run(&window, &repr, &pillars).unwrap())
        });
    }
    group.finish();
}

fn detector_step(c: &mut Criterion) {
    let seq = overfit_sequence(0).unwrap();
    let mut group = c.benchmark_group("detector_window");
    group.sample_size(10);
    for memory in [MemoryVariant::None, MemoryVariant::Lrm, MemoryVariant::Full] {
        let det = Detector::new(DetectorConfig { memory, ..DetectorConfig::default() }).unwrap();
        let state = DetectorState::zeros(&det.config);
        group.bench_function(BenchmarkId::new("forward_backward", format!("{memory:?}")), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let img = det.encode_window(&mut g, &seq.windows[3], INFERENCE_MODE).unwrap();
                let vars = bind_state(&mut g, &state);
                let out = det.step(&mut g, img, &vars).unwrap();
                let loss = det.window_loss(&mut g, &out, &seq.ground_truth[3]).unwrap();
                g.backward(loss.total).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, representations, detector_step);
criterion_main!(benches);
