//! `evpk`: conversion, benchmarking, synthetic data, training and evaluation
//! for event-camera streams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evpk_core::detector::{
    detections_to_csv, read_detections_file, standard_benchmark, sweep_pillars, train_sequences,
    write_detections_file, BenchmarkSpec, Detector, DetectorConfig, INFERENCE_MODE,
};
use evpk_core::encoder::EventPillars;
use evpk_core::eval::{map_coco, EvalDetection, EvalGroundTruth};
use evpk_core::event::{
    generate_synthetic, parse_event_file, read_gt_file, slice_windows, write_event_file, write_gt_file, EventFormat,
    EventWindow, SceneSpec, SensorGeometry,
};
use evpk_core::gradsuite::{run_suite, OPERATIONS};
use evpk_core::nn::{Mode, ParamStore};
use evpk_core::pillars::PillarConfig;
use evpk_core::repr::{ReprConfig, ReprKind};
use evpk_core::throughput::{measure, random_window, BenchTarget};
use evpk_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit status classes.
#[derive(Debug)]
enum Failure {
    /// Bad flags or flag values (exit 1).
    Usage(String),
    /// Unreadable or malformed input data (exit 2).
    Data(String),
    /// NaN or Inf during computation (exit 3).
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Attaches the offending flag or file to errors that do not name one.
fn ctx<T>(r: evpk_core::Result<T>, what: impl std::fmt::Display) -> CliResult<T> {
    r.map_err(|e| {
        let named = matches!(e, Error::Io { .. } | Error::Parse { .. } | Error::Ordering { .. });
        let f = Failure::from(e);
        if named {
            return f;
        }
        let msg = format!("{what}: {}", f.message());
        match f {
            Failure::Usage(_) => Failure::Usage(msg),
            Failure::Data(_) => Failure::Data(msg),
            Failure::Numeric(_) => Failure::Numeric(msg),
        }
    })
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(name = "evpk", version, about = "Event-camera representations, pillar encoding and recurrent detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SeedArg {
    /// Seed for every random choice; falls back to EVPK_SEED, then 0.
    #[arg(long, env = "EVPK_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct EventInput {
    /// Event file (`.bin`/`.evb` binary, anything else CSV text).
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Override the format guessed from the extension.
    #[arg(long, value_name = "csv|bin", value_parser = parse_format)]
    format: Option<EventFormat>,
}

impl EventInput {
    fn read(&self) -> CliResult<(Vec<evpk_core::event::Event>, SensorGeometry)> {
        let format = self.format.unwrap_or_else(|| EventFormat::from_path(&self.input));
        Ok(parse_event_file(&self.input, format)?)
    }
}

fn parse_format(s: &str) -> Result<EventFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_repr(s: &str) -> Result<String, String> {
    if s == "eventpillars" || s.parse::<ReprKind>().is_ok() {
        Ok(s.to_string())
    } else {
        let mut names: Vec<&str> = ReprKind::ALL.iter().map(|k| k.name()).collect();
        names.push("eventpillars");
        Err(format!("unknown representation `{s}`; valid kinds: {}", names.join(", ")))
    }
}

fn parse_budget(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected positive integers, got `{s}`")),
    }
}

fn positive(s: &str) -> Result<u64, String> {
    match s.parse::<u64>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert an event file into one tensor file per window.
    Convert {
        #[command(flatten)]
        input: EventInput,
        /// event_frame, event_count, timestamp_image, time_surface,
        /// ev_segnet_stats, voxel_grid or eventpillars.
        #[arg(long, value_parser = parse_repr)]
        repr: String,
        /// Temporal bins for voxel_grid.
        #[arg(long, default_value_t = 5)]
        bins: usize,
        /// Time-surface decay in microseconds (default: the window length).
        #[arg(long)]
        tau_us: Option<u64>,
        #[arg(long, default_value_t = 50, value_parser = positive)]
        window_ms: u64,
        /// Trained model whose encoder is used for eventpillars; without it
        /// the encoder is freshly initialized from --seed.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        jobs: u64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Events per second of every representation and of pillar building.
    Bench {
        /// Measure on this file instead of random events.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Random events to generate when no file is given.
        #[arg(long, default_value_t = 1_000_000, value_parser = positive)]
        events: u64,
        #[arg(long, default_value_t = 304)]
        width: u16,
        #[arg(long, default_value_t = 240)]
        height: u16,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Only this target.
        #[arg(long)]
        target: Option<String>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Render a scene file into events and labels.
    Synth {
        /// Scene description (key = value lines).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_events: PathBuf,
        #[arg(long)]
        out_gt: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<EventFormat>,
        #[arg(long, default_value_t = 50, value_parser = positive)]
        window_ms: u64,
        /// Replace the scene's own seed (EVPK_SEED also works).
        #[arg(long, env = "EVPK_SEED")]
        seed: Option<u64>,
    },
    /// Train the detector on the seeded synthetic benchmark.
    Train {
        /// Detector config (key = value lines); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV to write.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Training sequences in the benchmark.
        #[arg(long, default_value_t = 50)]
        sequences: usize,
        /// Seed of the benchmark data (default: --seed).
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 50, value_parser = positive)]
        window_ms: u64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run a trained model over an event file and write detections.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: EventInput,
        #[arg(long, default_value_t = 50, value_parser = positive)]
        window_ms: u64,
        /// Detections CSV to write (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a detections CSV against a ground-truth file.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Central-difference gradient checks of every differentiable operation.
    Gradcheck {
        /// Seeds per operation.
        #[arg(long, default_value_t = 20, value_parser = positive)]
        seeds: u64,
        /// Pass threshold on the relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// mAP@0.5 of a trained model as the pillar budget K varies.
    SweepPillars {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated pillar budgets.
        #[arg(long, value_parser = parse_budget, value_delimiter = ',', default_value = "8,16,32,64,128,256,512,1024")]
        budgets: Vec<usize>,
        /// Test sequences drawn from the benchmark.
        #[arg(long, default_value_t = 10)]
        sequences: usize,
        /// Seed of the benchmark data (default: --seed).
        #[arg(long)]
        data_seed: Option<u64>,
        /// K vs mAP CSV to write (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn windows_of(events: &[evpk_core::event::Event], geometry: SensorGeometry, window_ms: u64) -> CliResult<Vec<EventWindow>> {
    ctx(slice_windows(events, geometry, window_ms * 1000), "--window-ms")
}

fn convert(
    input: &EventInput,
    repr: &str,
    bins: usize,
    tau_us: Option<u64>,
    window_ms: u64,
    model: Option<&Path>,
    out: &Path,
    jobs: usize,
    seed: u64,
) -> CliResult {
    let (events, geometry) = input.read()?;
    let windows = windows_of(&events, geometry, window_ms)?;
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let encoder: Option<(ParamStore, EventPillars)> = if repr == "eventpillars" {
        Some(match model {
            Some(p) => {
                let det = ctx(Detector::load(p), p.display())?;
                (det.store, det.encoder)
            }
            None => {
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let enc = ctx(
                    EventPillars::new(&mut store, "encoder", 16, PillarConfig { seed, ..PillarConfig::default() }, &mut rng),
                    "--repr eventpillars",
                )?;
                (store, enc)
            }
        })
    } else {
        if model.is_some() {
            return Err(usage("--model only applies to --repr eventpillars"));
        }
        None
    };
    let kind = repr.parse::<ReprKind>().ok();
    let compute = |w: &EventWindow| -> evpk_core::Result<evpk_core::repr::GridTensor> {
        match (&encoder, kind) {
            (Some((store, enc)), _) => enc.pseudo_image(store, w, Mode::Train),
            (None, Some(kind)) => ReprConfig { kind, bins, tau_decay_us: tau_us }.compute(w),
            (None, None) => unreachable!("validated by the flag parser"),
        }
    };
    let chunk = windows.len().div_ceil(jobs.max(1)).max(1);
    let results: Vec<CliResult> = std::thread::scope(|s| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .enumerate()
            .map(|(ci, ws)| {
                let compute = &compute;
                s.spawn(move || -> CliResult {
                    for (j, w) in ws.iter().enumerate() {
                        let k = ci * chunk + j;
                        let t = ctx(compute(w), format!("--repr {repr}, window {k}"))?;
                        let path = out.join(format!("window_{k:05}.gtn"));
                        ctx(t.write(&path), path.display())?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    println!("wrote {} windows to {}", windows.len(), out.display());
    Ok(())
}

fn bench(
    input: Option<&Path>,
    events: u64,
    width: u16,
    height: u16,
    repeats: usize,
    target: Option<&str>,
    seed: u64,
) -> CliResult {
    let window = match input {
        Some(p) => {
            let format = EventFormat::from_path(p);
            let (ev, geometry) = parse_event_file(p, format)?;
            let (t0, t1) = (ev.first().map_or(0, |e| e.t), ev.last().map_or(1, |e| e.t + 1));
            ctx(EventWindow::new(ev, t0, t1.max(t0 + 1), geometry), p.display())?
        }
        None => {
            let geometry = SensorGeometry::new(width, height).map_err(|e| usage(format!("--width/--height: {e}")))?;
            ctx(random_window(events as usize, geometry, 50_000, seed), "--events")?
        }
    };
    let targets = match target {
        Some(t) => vec![BenchTarget::parse(t).map_err(|e| usage(format!("--target: {e}")))?],
        None => BenchTarget::all(),
    };
    let repr = ReprConfig::new(ReprKind::VoxelGrid);
    let pillars = PillarConfig { seed, ..PillarConfig::default() };
    println!("{:<18} {:>10} {:>12} {:>16}", "target", "events", "best_ms", "events_per_sec");
    for t in targets {
        let r = ctx(measure(t, &window, &repr, &pillars, repeats), t.name())?;
        println!("{:<18} {:>10} {:>12.3} {:>16.0}", r.target, r.events, r.best_seconds * 1e3, r.events_per_sec);
    }
    Ok(())
}

fn synth(scene: &Path, out_events: &Path, out_gt: &Path, format: Option<EventFormat>, window_ms: u64, seed: Option<u64>) -> CliResult {
    let mut spec = SceneSpec::load(scene)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let seq = ctx(generate_synthetic(&spec, window_ms * 1000), scene.display())?;
    let format = format.unwrap_or_else(|| EventFormat::from_path(out_events));
    write_event_file(&seq.events(), seq.geometry, out_events, format)?;
    write_gt_file(&seq.flat_ground_truth(), out_gt)?;
    println!(
        "{} events in {} windows, {} boxes",
        seq.events().len(),
        seq.windows.len(),
        seq.flat_ground_truth().len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    out: &Path,
    loss_csv: Option<&Path>,
    sequences: usize,
    data_seed: u64,
    epochs: Option<usize>,
    lr: Option<f64>,
    window_ms: u64,
    seed: u64,
) -> CliResult {
    let mut cfg = match config {
        Some(p) => DetectorConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Data(e.to_string()),
            other => Failure::Usage(format!("{}: {other}", p.display())),
        })?,
        None => DetectorConfig::default(),
    };
    cfg.seed = seed;
    cfg.window_us = window_ms * 1000;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.lr = lr;
    }
    ctx(cfg.validate(), "--config").map_err(|f| usage(f.message()))?;
    if sequences == 0 {
        return Err(usage("--sequences must be at least 1"));
    }
    let spec = BenchmarkSpec {
        size: cfg.input_size as u16,
        window_us: cfg.window_us,
        train: sequences,
        test: 0,
        seed: data_seed,
        ..BenchmarkSpec::default()
    };
    let data = ctx(standard_benchmark(&spec), "--data-seed")?;
    let mut det = ctx(Detector::new(cfg), "--config")?;
    let report = train_sequences(&mut det, &data.train)?;
    det.save(out)?;
    if let Some(p) = loss_csv {
        write_file(p, report.to_csv().as_bytes())?;
    }
    let l = report.losses();
    println!(
        "{} steps, loss {:.6} -> {:.6}, model written to {}",
        l.len(),
        l.first().copied().unwrap_or(f64::NAN),
        l.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn detect(model: &Path, input: &EventInput, window_ms: u64, out: Option<&Path>) -> CliResult {
    let det = ctx(Detector::load(model), model.display())?;
    let (events, geometry) = input.read()?;
    let size = det.config.input_size;
    if geometry.width() != size || geometry.height() != size {
        return Err(Failure::Data(format!(
            "{}: sensor is {}x{}, model expects {size}x{size}",
            input.input.display(),
            geometry.width(),
            geometry.height()
        )));
    }
    let windows = windows_of(&events, geometry, window_ms)?;
    let per_window = det.infer_sequence(&windows, INFERENCE_MODE)?;
    let dets: Vec<EvalDetection> = per_window
        .iter()
        .enumerate()
        .flat_map(|(k, ds)| {
            ds.iter()
                .map(move |d| EvalDetection { image: k, class_id: d.class_id, score: d.score, bbox: d.bbox })
        })
        .collect();
    match out {
        Some(p) => write_detections_file(&dets, p)?,
        None => print!("{}", detections_to_csv(&dets)),
    }
    Ok(())
}

fn eval(detections: &Path, gt: &Path, out: Option<&Path>) -> CliResult {
    let dets = read_detections_file(detections)?;
    let gts: Vec<EvalGroundTruth> = read_gt_file(gt)?
        .iter()
        .map(|g| EvalGroundTruth { image: g.window, class_id: g.class_id, bbox: g.bbox() })
        .collect();
    let result = map_coco(&dets, &gts)?;
    let report = result.report();
    print!("{report}");
    if let Some(p) = out {
        write_file(p, report.as_bytes())?;
    }
    Ok(())
}

fn gradcheck(seeds: u64, tolerance: f64, base: u64) -> CliResult {
    if !(tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let seeds: Vec<u64> = (0..seeds).map(|i| base.wrapping_add(i)).collect();
    let entries = run_suite(&seeds)?;
    let mut table = format!("{:<22} {:>6} {:>12} {:>14}\n", "operation", "seeds", "coordinates", "max_rel_err");
    let mut worst: f64 = 0.0;
    for e in &entries {
        worst = worst.max(e.max_rel_err);
        let _ = writeln!(table, "{:<22} {:>6} {:>12} {:>14.3e}", e.name, e.seeds, e.coordinates, e.max_rel_err);
    }
    print!("{table}");
    println!("max rel err {worst:.3e} over {} operations", OPERATIONS.len());
    if worst < tolerance {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed: max rel err {worst:.3e} >= --tolerance {tolerance:e}")))
    }
}

fn sweep(model: &Path, budgets: &[usize], sequences: usize, data_seed: u64, out: Option<&Path>) -> CliResult {
    let det = ctx(Detector::load(model), model.display())?;
    if sequences == 0 {
        return Err(usage("--sequences must be at least 1"));
    }
    let spec = BenchmarkSpec {
        size: det.config.input_size as u16,
        window_us: det.config.window_us,
        train: 0,
        test: sequences,
        seed: data_seed,
        ..BenchmarkSpec::default()
    };
    let data = ctx(standard_benchmark(&spec), "--data-seed")?;
    let rows = ctx(sweep_pillars(&det, &data.test, budgets), "--budgets")?;
    let mut csv = String::from("max_pillars,map50\n");
    for (k, m) in rows {
        let _ = writeln!(csv, "{k},{m:.6}");
    }
    match out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Convert { input, repr, bins, tau_us, window_ms, model, out, jobs, seed } => {
            convert(&input, &repr, bins, tau_us, window_ms, model.as_deref(), &out, jobs as usize, seed.seed)
        }
        Command::Bench { input, events, width, height, repeats, target, seed } => {
            bench(input.as_deref(), events, width, height, repeats, target.as_deref(), seed.seed)
        }
        Command::Synth { scene, out_events, out_gt, format, window_ms, seed } => {
            synth(&scene, &out_events, &out_gt, format, window_ms, seed)
        }
        Command::Train { config, out, loss_csv, sequences, data_seed, epochs, lr, window_ms, seed } => train(
            config.as_deref(),
            &out,
            loss_csv.as_deref(),
            sequences,
            data_seed.unwrap_or(seed.seed),
            epochs,
            lr,
            window_ms,
            seed.seed,
        ),
        Command::Detect { model, input, window_ms, out } => detect(&model, &input, window_ms, out.as_deref()),
        Command::Eval { detections, gt, out } => eval(&detections, &gt, out.as_deref()),
        Command::Gradcheck { seeds, tolerance, seed } => gradcheck(seeds, tolerance, seed.seed),
        Command::SweepPillars { model, budgets, sequences, data_seed, out, seed } => {
            sweep(&model, &budgets, sequences, data_seed.unwrap_or(seed.seed), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
