use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evpk_core::event::{parse_event_file, slice_windows, EventFormat};
use evpk_core::repr::{voxel_grid, GridTensor};

fn evpk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evpk"))
        .args(args)
        .env_remove("EVPK_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SCENE: &str = "width = 64\nheight = 64\nduration_ms = 300\nthreshold = 0.2\nnoise_rate = 0.5\nseed = 4\n\
                     box = 8, 20, 16, 16, 30, 10, 1, 0\nbox = 40, 40, 8, 8, -20, -30, -1, 1\n";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Scene rendered to `events.evcsv` and `gt.csv` inside `dir`.
fn synth_scene(dir: &Path) -> (PathBuf, PathBuf) {
    let scene = dir.join("scene.txt");
    fs::write(&scene, SCENE).unwrap();
    let (ev, gt) = (dir.join("events.evcsv"), dir.join("gt.csv"));
    let o = evpk(&["synth", "--scene", p(&scene), "--out-events", p(&ev), "--out-gt", p(&gt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (ev, gt)
}

#[test]
fn convert_writes_one_file_per_window_matching_library_output() {
    let dir = tempfile::tempdir().unwrap();
    let (ev, _) = synth_scene(dir.path());
    let out = dir.path().join("vox");
    let o = evpk(&["convert", "--in", p(&ev), "--repr", "voxel_grid", "--bins", "5", "--window-ms", "50", "--out", p(&out), "--jobs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (events, geometry) = parse_event_file(&ev, EventFormat::Csv).unwrap();
    let windows = slice_windows(&events, geometry, 50_000).unwrap();
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), windows.len());
    for (f, w) in files.iter().zip(&windows) {
        let on_disk = GridTensor::read(f).unwrap();
        // the file stores f32 and no channel labels
        let expected = voxel_grid(w, 5).unwrap().to_f32_precision();
        assert_eq!((on_disk.height(), on_disk.width(), on_disk.channels()), (expected.height(), expected.width(), expected.channels()));
        let same = on_disk.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{}", f.display());
    }
}

#[test]
fn convert_eventpillars_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (ev, _) = synth_scene(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = evpk(&["convert", "--in", p(&ev), "--repr", "eventpillars", "--out", p(&out), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("window_00002.gtn")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn unknown_representation_is_a_usage_error_listing_kinds() {
    let o = evpk(&["convert", "--in", "x.evcsv", "--repr", "bogus", "--out", "o"]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("voxel_grid") && e.contains("time_surface") && e.contains("--repr"), "{e}");
}

#[test]
fn missing_input_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.evcsv");
    let o = evpk(&["convert", "--in", p(&missing), "--repr", "event_count", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.evcsv"), "{}", stderr(&o));
}

#[test]
fn malformed_event_file_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.evcsv");
    fs::write(&f, "# evcsv v1 W=8 H=8\n1,2,10,1\n1,2,x,1\n").unwrap();
    let o = evpk(&["convert", "--in", p(&f), "--repr", "event_count", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("bad.evcsv") && e.contains("line 3"), "{e}");
}

#[test]
fn bench_reports_every_target_and_leaves_input_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (ev, _) = synth_scene(dir.path());
    let before = fs::read(&ev).unwrap();
    let o = evpk(&["bench", "--in", p(&ev), "--repeats", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&ev).unwrap(), before);
    let out = stdout(&o);
    for t in ["event_frame", "event_count", "voxel_grid", "time_surface", "build_pillars"] {
        assert!(out.contains(t), "{out}");
    }
    let o = evpk(&["bench", "--events", "5000", "--repeats", "1", "--target", "event_count"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = evpk(&["bench", "--events", "5000", "--target", "fft"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--target"));
}

#[test]
fn synth_is_deterministic_and_respects_seed_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (a, gt_a) = synth_scene(dir.path());
    let first = (fs::read(&a).unwrap(), fs::read(&gt_a).unwrap());
    let (a, gt_a) = synth_scene(dir.path());
    assert_eq!((fs::read(&a).unwrap(), fs::read(&gt_a).unwrap()), first);

    let scene = dir.path().join("scene.txt");
    let other = dir.path().join("other.bin");
    let o = Command::new(env!("CARGO_BIN_EXE_evpk"))
        .args(["synth", "--scene", p(&scene), "--out-events", p(&other), "--out-gt", p(&dir.path().join("g2.csv"))])
        .env("EVPK_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (x, _) = parse_event_file(&other, EventFormat::Bin).unwrap();
    let (y, _) = parse_event_file(&a, EventFormat::Csv).unwrap();
    assert_ne!(x, y);
}

#[test]
fn eval_perfect_detections_and_bad_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gt) = synth_scene(dir.path());
    let mut csv = String::new();
    for line in fs::read_to_string(&gt).unwrap().lines() {
        let f: Vec<&str> = line.split(',').collect();
        csv.push_str(&format!("{},{},0.9,{},{},{},{}\n", f[0], f[1], f[2], f[3], f[4], f[5]));
    }
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, csv).unwrap();
    let report = dir.path().join("report.txt");
    let o = evpk(&["eval", "--detections", p(&dets), "--gt", p(&gt), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("map50=1.000000\nmap50_95=1.000000\n"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&report).unwrap(), stdout(&o));

    fs::write(&dets, "0,0,0.9,1,2,3\n").unwrap();
    let o = evpk(&["eval", "--detections", p(&dets), "--gt", p(&gt)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dets.csv"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_prints_max_error() {
    let o = evpk(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("max rel err") && out.contains("eventpillars_forward"), "{out}");
    let o = evpk(&["gradcheck", "--seeds", "1", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_detect_eval_and_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (ev, gt) = synth_scene(dir.path());
    let cfg = dir.path().join("det.cfg");
    fs::write(&cfg, "# tiny run\nmemory = lrm\nbptt = 5\n").unwrap();
    let model = dir.path().join("model.bin");
    let curve = dir.path().join("loss.csv");
    let o = evpk(&[
        "train", "--config", p(&cfg), "--out", p(&model), "--loss-csv", p(&curve), "--sequences", "1", "--epochs", "1",
        "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = fs::read_to_string(&curve).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "step,epoch,sequence,first_window,loss,cls,reg,lr");
    assert_eq!(lines.len(), 3);

    // same seed, same curve
    let curve2 = dir.path().join("loss2.csv");
    let model2 = dir.path().join("model2.bin");
    let o = evpk(&[
        "train", "--config", p(&cfg), "--out", p(&model2), "--loss-csv", p(&curve2), "--sequences", "1", "--epochs", "1",
        "--seed", "3",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&curve).unwrap(), fs::read(&curve2).unwrap());
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model2).unwrap());

    let dets = dir.path().join("dets.csv");
    let o = evpk(&["detect", "--model", p(&model), "--in", p(&ev), "--out", p(&dets)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = evpk(&["eval", "--detections", p(&dets), "--gt", p(&gt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("map50="));

    let sweep = dir.path().join("sweep.csv");
    let o = evpk(&["sweep-pillars", "--model", p(&model), "--budgets", "4,64", "--sequences", "1", "--out", p(&sweep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&sweep).unwrap();
    assert!(text.starts_with("max_pillars,map50\n4,") && text.contains("\n64,"), "{text}");

    let o = evpk(&["sweep-pillars", "--model", p(&model), "--budgets", "4,0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--budgets"));
    let o = evpk(&["detect", "--model", p(&gt), "--in", p(&ev)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gt.csv"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lr = 0.001\ncolour = red\n").unwrap();
    let o = evpk(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("bad.cfg") && e.contains("line 2"), "{e}");
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = evpk(&[
        "train", "--out", p(&dir.path().join("m")), "--sequences", "1", "--epochs", "3", "--lr", "1e300",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&evpk(&["convert", "--frobnicate"])), 1);
    assert_eq!(code(&evpk(&["train"])), 1);
    let o = evpk(&["--help"]);
    assert_eq!(code(&o), 0);
    for cmd in ["convert", "bench", "synth", "train", "detect", "eval", "gradcheck", "sweep-pillars"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
    let o = evpk(&["convert", "--help"]);
    assert!(stdout(&o).contains("--window-ms") && stdout(&o).contains("--jobs"));
}
