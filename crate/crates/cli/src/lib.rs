//! Commands behind the `mcslam` binary: simulate, run, eval, overlap and
//! bench. Each command is a plain function of a [`RunConfig`] so tests and
//! scripts can call it without a process boundary.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcslam::calibration::{load_rig, RigCalibration};
use mcslam::eval::{ate, read_tum, write_tum, AlignMode, AteReport, EvalError, Trajectory};
use mcslam::features::TrackFileSource;
use mcslam::overlap::{compute_overlap_map_with_padding, Grid, PairGeometry};
use mcslam::pipeline::{lost_intervals, run_source, write_run_log, PipelineConfig, RunOutput};
use mcslam::sim::{
    export_dataset, RigKind, SimError, SimFrameSource, SimSpec, SyntheticWorld, GROUNDTRUTH_FILE, RIG_FILE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const KEYFRAMES_FILE: &str = "keyframes.txt";
pub const RUN_LOG_FILE: &str = "run_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or paths.
    #[error("{0}")]
    Usage(String),
    /// Anything that fails after the inputs were accepted.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Camera counts, rig kinds and seeds swept by `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub cameras: Vec<usize>,
    pub kinds: Vec<RigKind>,
    /// Runs per configuration, with seeds `seed .. seed + seeds`.
    pub seeds: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            cameras: vec![2, 3, 4, 5],
            kinds: vec![RigKind::OvLinear, RigKind::NOvDivergent],
            seeds: 10,
        }
    }
}

/// Everything a command needs. Read from TOML; every field has a default.
///
/// The top-level `seed` drives both the simulator and the pipeline.
/// `run` reads `dataset` (a directory of track CSVs with `rig.json`) when
/// given, and otherwise simulates `sim` in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Rig JSON; defaults to `<dataset>/rig.json`.
    pub rig: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub sim: SimSpec,
    pub pipeline: PipelineConfig,
    pub bench: BenchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            rig: None,
            dataset: None,
            sim: SimSpec::default(),
            pipeline: PipelineConfig::default(),
            bench: BenchSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CliError> {
        toml::from_str(s).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The simulator spec with the top-level seed applied.
    pub fn sim_spec(&self) -> SimSpec {
        SimSpec {
            seed: self.seed,
            ..self.sim.clone()
        }
    }

    /// The pipeline thresholds with the top-level seed applied.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            ..self.pipeline.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline_config().validate().map_err(usage)?;
        if let Some(d) = &self.dataset {
            if !d.is_dir() {
                return Err(CliError::Usage(format!("dataset directory {} does not exist", d.display())));
            }
        }
        if let Some(r) = self.rig_path() {
            if !r.is_file() {
                return Err(CliError::Usage(format!("rig file {} does not exist", r.display())));
            }
        }
        if self.bench.cameras.is_empty() || self.bench.kinds.is_empty() || self.bench.seeds == 0 {
            return Err(usage("bench needs at least one camera count, rig kind and seed"));
        }
        Ok(())
    }

    fn rig_path(&self) -> Option<PathBuf> {
        self.rig
            .clone()
            .or_else(|| self.dataset.as_ref().map(|d| d.join(RIG_FILE)))
    }

    fn world(&self, spec: &SimSpec) -> Result<SyntheticWorld, CliError> {
        SyntheticWorld::from_spec(spec).map_err(|e| match e {
            SimError::InvalidSpec(_) => usage(e),
            other => runtime(other),
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn read_trajectory(path: &Path) -> Result<Trajectory<f64>, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    read_tum(BufReader::new(f)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Renders the configured simulation into `out` as a dataset directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let world = cfg.world(&cfg.sim_spec())?;
    export_dataset(&world, &cfg.out).map_err(runtime)?;
    Ok(cfg.out.clone())
}

/// What `run` produced, for the console summary.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub frames: usize,
    pub posed: usize,
    pub keyframes: usize,
    pub lost: Vec<(u64, u64)>,
    /// SE3 and Sim3 errors against ground truth, when it is available.
    pub ate: Option<(AteReport<f64>, AteReport<f64>)>,
}

/// Runs the pipeline and writes the estimated trajectory, the keyframe
/// trajectory and the run log into `out`; with ground truth at hand, also
/// `metrics.csv`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let pipeline = cfg.pipeline_config();
    let (output, gt): (RunOutput, Option<Trajectory<f64>>) = match &cfg.dataset {
        Some(dir) => {
            let rig_path = cfg.rig_path().expect("dataset implies a rig path");
            let rig: RigCalibration = load_rig(&rig_path).map_err(usage)?;
            let mut source = TrackFileSource::open(dir, rig.num_cameras()).map_err(usage)?;
            let out = run_source(&mut source, &rig, &pipeline).map_err(runtime)?;
            let gt_path = dir.join(GROUNDTRUTH_FILE);
            let gt = if gt_path.is_file() { Some(read_trajectory(&gt_path)?) } else { None };
            (out, gt)
        }
        None => {
            let world = cfg.world(&cfg.sim_spec())?;
            let rig = match cfg.rig_path() {
                Some(p) => load_rig(&p).map_err(usage)?,
                None => world.rig.clone(),
            };
            let out = run_source(&mut SimFrameSource::new(&world), &rig, &pipeline).map_err(runtime)?;
            (out, Some(world.ground_truth()))
        }
    };
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(TRAJECTORY_FILE), |w| write_tum(w, &output.trajectory))?;
    write_file(&cfg.out.join(KEYFRAMES_FILE), |w| write_tum(w, &output.keyframes))?;
    write_file(&cfg.out.join(RUN_LOG_FILE), |w| write_run_log(w, &output.log))?;

    let ate = match &gt {
        Some(gt) => match (
            ate(&output.trajectory, gt, AlignMode::Se3),
            ate(&output.trajectory, gt, AlignMode::Sim3),
        ) {
            (Ok(a), Ok(b)) => Some((a, b)),
            // Too few tracked frames to align is reported, not fatal.
            _ => None,
        },
        None => None,
    };
    if let Some((se3, sim3)) = &ate {
        let mut w = metrics_writer(create(&cfg.out.join(METRICS_FILE))?);
        write_metrics_row(&mut w, AlignMode::Se3, se3)?;
        write_metrics_row(&mut w, AlignMode::Sim3, sim3)?;
        w.flush().map_err(runtime)?;
    }
    Ok(RunSummary {
        frames: output.log.len(),
        posed: output.trajectory.len(),
        keyframes: output.keyframes.len(),
        lost: lost_intervals(&output.log),
        ate,
    })
}

pub const METRICS_HEADER: [&str; 7] = ["mode", "ATE (m)", "ATE mean (m)", "ATE (%)", "scale", "pairs", "dropped"];

fn metrics_writer<W: Write>(w: W) -> csv::Writer<W> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER).expect("header");
    out
}

fn mode_name(mode: AlignMode) -> &'static str {
    match mode {
        AlignMode::Se3 => "se3",
        AlignMode::Sim3 => "sim3",
    }
}

fn write_metrics_row<W: Write>(w: &mut csv::Writer<W>, mode: AlignMode, r: &AteReport<f64>) -> Result<(), CliError> {
    w.write_record([
        mode_name(mode).to_string(),
        format!("{:.6}", r.rmse),
        format!("{:.6}", r.mean),
        format!("{:.4}", r.percent),
        format!("{:.6}", r.scale),
        r.pairs.to_string(),
        r.dropped.to_string(),
    ])
    .map_err(runtime)
}

/// Aligns `est` to `gt` and writes one metrics row as CSV to `w`.
pub fn cmd_eval<W: Write>(est: &Path, gt: &Path, mode: AlignMode, w: W) -> Result<AteReport<f64>, CliError> {
    let est = read_trajectory(est)?;
    let gt = read_trajectory(gt)?;
    let report = ate(&est, &gt, mode).map_err(|e| match e {
        EvalError::InsufficientOverlap(_) => runtime(e),
        other => usage(other),
    })?;
    let mut out = metrics_writer(w);
    write_metrics_row(&mut out, mode, &report)?;
    out.flush().map_err(runtime)?;
    Ok(report)
}

/// Writes `camera_i,camera_j,geometry,overlaps,fraction_nonempty` for
/// every ordered camera pair of a rig.
pub fn cmd_overlap<W: Write>(rig: &Path, pipeline: &PipelineConfig, w: W) -> Result<(), CliError> {
    let rig = load_rig(rig).map_err(usage)?;
    let grid = Grid::new(pipeline.grid_rows, pipeline.grid_cols);
    let map = compute_overlap_map_with_padding(&rig, grid, pipeline.overlap_padding).map_err(usage)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["camera_i", "camera_j", "geometry", "overlaps", "fraction_nonempty"])
        .map_err(runtime)?;
    for i in 0..rig.num_cameras() {
        for j in 0..rig.num_cameras() {
            let Some(p) = map.pair(i, j) else { continue };
            let geometry = match p.geometry {
                PairGeometry::Epipolar(_) => "epipolar",
                PairGeometry::Rotation(_) => "rotation",
            };
            out.write_record([
                rig.camera(i).id.clone(),
                rig.camera(j).id.clone(),
                geometry.to_string(),
                p.overlaps.to_string(),
                format!("{:.4}", p.fraction_nonempty()),
            ])
            .map_err(runtime)?;
        }
    }
    out.flush().map_err(runtime)
}

/// One configuration of the benchmark matrix, summarized over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub config: String,
    pub cameras: usize,
    pub runs: usize,
    /// Runs whose trajectory could be aligned to ground truth.
    pub aligned: usize,
    pub runs_with_lost: usize,
    pub median_ate_m: f64,
    pub median_ate_pct: f64,
    pub median_scale: f64,
    pub ms_feature: f64,
    pub ms_track: f64,
    pub ms_backend: f64,
    pub ms_total: f64,
    pub wall_s: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn kind_label(kind: RigKind) -> &'static str {
    match kind {
        RigKind::OvLinear => "OV",
        RigKind::NOvDivergent => "N-OV",
        RigKind::Mono => "mono",
    }
}

/// Runs one configuration over `seeds` consecutive seeds with Sim3
/// alignment, or `mode` when given.
pub fn bench_config(cfg: &RunConfig, kind: RigKind, cameras: usize, mode: AlignMode) -> Result<BenchRow, CliError> {
    let mut ates = Vec::new();
    let mut pcts = Vec::new();
    let mut scales = Vec::new();
    let (mut feat, mut track, mut backend, mut frames) = (0.0, 0.0, 0.0, 0usize);
    let mut runs_with_lost = 0;
    let start = Instant::now();
    for k in 0..cfg.bench.seeds {
        let seed = cfg.seed + k;
        let mut spec = cfg.sim.clone();
        spec.seed = seed;
        spec.rig.kind = kind;
        spec.rig.n_cameras = cameras;
        let world = cfg.world(&spec)?;
        let pipeline = PipelineConfig {
            seed,
            ..cfg.pipeline.clone()
        };
        let out = run_source(&mut SimFrameSource::new(&world), &world.rig, &pipeline).map_err(runtime)?;
        for r in &out.log {
            feat += r.ms_feature;
            track += r.ms_track;
            backend += r.ms_backend;
        }
        frames += out.log.len();
        if !lost_intervals(&out.log).is_empty() {
            runs_with_lost += 1;
        }
        if let Ok(r) = ate(&out.trajectory, &world.ground_truth(), mode) {
            ates.push(r.rmse);
            pcts.push(r.percent);
            scales.push(r.scale);
        }
    }
    let n = frames.max(1) as f64;
    Ok(BenchRow {
        config: format!("{}-{}", kind_label(kind), cameras),
        cameras,
        runs: cfg.bench.seeds as usize,
        aligned: ates.len(),
        runs_with_lost,
        median_ate_m: median(&mut ates),
        median_ate_pct: median(&mut pcts),
        median_scale: median(&mut scales),
        ms_feature: feat / n,
        ms_track: track / n,
        ms_backend: backend / n,
        ms_total: (feat + track + backend) / n,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// The full camera-count by rig-kind matrix; writes `bench.csv` into `out`.
pub fn cmd_bench(cfg: &RunConfig, mode: AlignMode) -> Result<Vec<BenchRow>, CliError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &kind in &cfg.bench.kinds {
        for &n in &cfg.bench.cameras {
            if kind == RigKind::Mono && n != 1 {
                continue;
            }
            rows.push(bench_config(cfg, kind, n, mode)?);
        }
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join(BENCH_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok(rows)
}

/// Human-readable table of bench rows.
pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>8} {:>8} {:>8} {:>5} {:>9} {:>9} {:>9} {:>9}\n",
        "config", "runs", "ATE (m)", "ATE (%)", "scale", "lost", "feat ms", "track ms", "opt ms", "total ms"
    );
    for r in rows {
        s += &format!(
            "{:<8} {:>5} {:>8.4} {:>8.3} {:>8.4} {:>5} {:>9.2} {:>9.2} {:>9.2} {:>9.2}\n",
            r.config,
            r.runs,
            r.median_ate_m,
            r.median_ate_pct,
            r.median_scale,
            r.runs_with_lost,
            r.ms_feature,
            r.ms_track,
            r.ms_backend,
            r.ms_total
        );
    }
    s
}

/// The rig a command operates on: an explicit path, or the dataset's.
pub fn resolve_rig(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.rig_path())
        .ok_or_else(|| usage("no rig given: pass a rig file or set `rig` or `dataset` in the config"))
}
