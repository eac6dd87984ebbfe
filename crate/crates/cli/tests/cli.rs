use std::fs;
use std::path::Path;
use std::process::Command;

use mcslam::eval::{loop_drift, read_tum, AlignMode};
use mcslam::features::TrackFileSource;
use mcslam::features::FrameSource;
use mcslam::sim::{RigKind, Shape};
use mcslam_cli::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcslam"))
}

fn config(out: &Path, kind: RigKind, n: usize, shape: Shape) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        ..Default::default()
    };
    cfg.sim.rig.kind = kind;
    cfg.sim.rig.n_cameras = n;
    cfg.sim.trajectory.shape = shape;
    cfg
}

fn trajectory(path: &Path) -> mcslam::eval::Trajectory<f64> {
    read_tum(std::io::BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn simulate_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("ov5"), RigKind::OvLinear, 5, Shape::Square);
    let out = cmd_simulate(&cfg).unwrap();
    let rig = mcslam::calibration::load_rig(out.join("rig.json")).unwrap();
    assert_eq!(rig.num_cameras(), 5);
    let mut src = TrackFileSource::open(&out, 5).unwrap();
    let mut frames = 0;
    while let Some(f) = src.next_frame() {
        assert_eq!(f.cameras.len(), 5);
        frames += 1;
    }
    assert_eq!(frames, cfg.sim.trajectory.n_frames);
    assert_eq!(trajectory(&out.join("groundtruth.txt")).len(), frames);

    let mono = config(&dir.path().join("mono"), RigKind::Mono, 1, Shape::Straight);
    let out = cmd_simulate(&mono).unwrap();
    assert!(out.join("tracks.csv").is_file());
}

#[test]
fn bad_simulation_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), RigKind::Mono, 2, Shape::Square);
    assert!(matches!(cmd_simulate(&cfg), Err(CliError::Usage(_))));

    let toml = dir.path().join("bad.toml");
    fs::write(&toml, "[sim.rig]\nn_cameras = 0\n").unwrap();
    let status = bin().arg("simulate").arg("--config").arg(&toml).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(matches!(RunConfig::from_toml_str("[pipeline]\ntau_trak = 3\n"), Err(CliError::Usage(_))));
    let cfg = RunConfig::from_toml_str("seed = 4\n[pipeline]\ntau_track = 40\n").unwrap();
    assert_eq!(cfg.pipeline_config().tau_track, 40);
    assert_eq!(cfg.pipeline_config().seed, 4);
    assert_eq!(cfg.sim_spec().seed, 4);
}

#[test]
fn help_lists_every_pipeline_threshold() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let defaults = toml::to_string(&mcslam::pipeline::PipelineConfig::default()).unwrap();
    for line in defaults.lines().filter(|l| l.contains(" = ")) {
        let key = line.split(" = ").next().unwrap();
        assert!(text.contains(line), "{key} missing from --help");
    }
}

#[test]
fn run_writes_outputs_and_closes_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("ov2"), RigKind::OvLinear, 2, Shape::Square);
    let s = cmd_run(&cfg).unwrap();
    assert!(s.lost.is_empty());
    let est = trajectory(&cfg.out.join(TRAJECTORY_FILE));
    assert_eq!(est.len(), s.posed);
    assert!(trajectory(&cfg.out.join(KEYFRAMES_FILE)).len() >= 2);
    let log = fs::read_to_string(cfg.out.join(RUN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().next().unwrap(), mcslam::pipeline::RUN_LOG_HEADER);
    assert_eq!(log.lines().count(), s.frames + 1);
    // The square starts and ends at the same pose.
    assert!(loop_drift(&est) < 0.1, "{}", loop_drift(&est));
    let (se3, _) = s.ate.unwrap();
    assert!(se3.rmse < 0.05);
}

#[test]
fn non_overlapping_rig_has_the_larger_scale_error() {
    let dir = tempfile::tempdir().unwrap();
    let ov = cmd_run(&config(&dir.path().join("ov"), RigKind::OvLinear, 2, Shape::Square)).unwrap();
    let nov = cmd_run(&config(&dir.path().join("nov"), RigKind::NOvDivergent, 3, Shape::Square)).unwrap();
    let err = |s: &RunSummary| (s.ate.as_ref().unwrap().1.scale - 1.0).abs();
    assert!(err(&nov) > err(&ov), "N-OV {} vs OV {}", err(&nov), err(&ov));
}

#[test]
fn run_from_exported_dataset_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let sim = config(&dir.path().join("ds"), RigKind::OvLinear, 2, Shape::Square);
    cmd_simulate(&sim).unwrap();
    let from_disk = RunConfig {
        dataset: Some(sim.out.clone()),
        out: dir.path().join("disk"),
        ..sim.clone()
    };
    let in_memory = RunConfig {
        out: dir.path().join("mem"),
        ..sim
    };
    cmd_run(&from_disk).unwrap();
    cmd_run(&in_memory).unwrap();
    // Pixels go through the track file with full round-trip precision.
    assert_eq!(
        fs::read(from_disk.out.join(TRAJECTORY_FILE)).unwrap(),
        fs::read(in_memory.out.join(TRAJECTORY_FILE)).unwrap()
    );
}

#[test]
fn missing_rig_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), RigKind::OvLinear, 2, Shape::Square);
    cfg.rig = Some(dir.path().join("nope.json"));
    assert!(matches!(cmd_run(&cfg), Err(CliError::Usage(_))));
    let toml = dir.path().join("c.toml");
    fs::write(&toml, format!("rig = {:?}\n", dir.path().join("nope.json"))).unwrap();
    let status = bin().arg("run").arg("--config").arg(&toml).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn eval_reports_zero_for_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), RigKind::OvLinear, 2, Shape::Square);
    cmd_simulate(&cfg).unwrap();
    let gt = dir.path().join("groundtruth.txt");
    let mut buf = Vec::new();
    let r = cmd_eval(&gt, &gt, AlignMode::Sim3, &mut buf).unwrap();
    assert!(r.rmse < 1e-9 && (r.scale - 1.0).abs() < 1e-9);
    let text = String::from_utf8(buf).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    for col in ["ATE (m)", "ATE (%)", "scale"] {
        assert!(header.contains(&col), "{col}");
    }

    let shifted = dir.path().join("shifted.txt");
    let body: String = fs::read_to_string(&gt)
        .unwrap()
        .lines()
        .map(|l| {
            let (t, rest) = l.split_once(' ').unwrap();
            format!("{} {rest}\n", t.parse::<f64>().unwrap() + 1000.0)
        })
        .collect();
    fs::write(&shifted, body).unwrap();
    assert!(matches!(cmd_eval(&shifted, &gt, AlignMode::Se3, Vec::new()), Err(CliError::Runtime(_))));
    let status = bin().arg("eval").arg(&shifted).arg(&gt).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn overlap_table_lists_ordered_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), RigKind::OvLinear, 3, Shape::Square);
    cmd_simulate(&cfg).unwrap();
    let mut buf = Vec::new();
    cmd_overlap(&dir.path().join("rig.json"), &cfg.pipeline, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn bench_single_config_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), RigKind::OvLinear, 2, Shape::Circle);
    cfg.sim.trajectory.n_frames = 60;
    cfg.bench = BenchSpec {
        cameras: vec![2],
        kinds: vec![RigKind::OvLinear],
        seeds: 2,
    };
    let rows = cmd_bench(&cfg, AlignMode::Sim3).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].config, "OV-2");
    assert_eq!(rows[0].runs, 2);
    assert!(rows[0].ms_total > 0.0);
    let csv = fs::read_to_string(dir.path().join(BENCH_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(&dir.path().join("a"), RigKind::OvLinear, 3, Shape::Square);
    let b = RunConfig {
        out: dir.path().join("b"),
        ..a.clone()
    };
    cmd_run(&a).unwrap();
    cmd_run(&b).unwrap();
    for f in [TRAJECTORY_FILE, KEYFRAMES_FILE] {
        assert_eq!(fs::read(a.out.join(f)).unwrap(), fs::read(b.out.join(f)).unwrap(), "{f}");
    }
}
