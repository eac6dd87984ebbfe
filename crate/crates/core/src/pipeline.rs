//! Tracking and mapping: initialization, per-frame tracking against the
//! last keyframe and its covisible neighbours, keyframe insertion with
//! windowed bundle adjustment, and landmark culling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    marginal_window, optimize, FactorGraph, LandmarkVariable, OptimizeOptions, PosePrior, PoseVariable,
    ReprojectionFactor,
};
use crate::calibration::RigCalibration;
use crate::eval::Trajectory;
use crate::features::{
    build_frame, keypoint_ray, representative_descriptor, Descriptor, FeatureError, FrameInput, FrameSource,
    Keypoint, MatchConfig, MultiCameraFrame,
};
use crate::geometry::{PluckerRay, Pose};
use crate::overlap::{compute_overlap_map_with_padding, Grid, OverlapError, OverlapMap};
use crate::solvers::{
    ransac, solve_gpnp, solve_rel_pose_generalized, solve_rel_pose_mono_with, triangulate, GeneralizedRelativePoseEstimator,
    GpnpEstimator, GpnpOptions, MonoRelativePoseEstimator, PixelCorrespondence, RansacConfig, RayCorrespondence,
    RayPointMatch, SolverError, translation_scale_spread, DEFAULT_MIN_PARALLAX_DEG,
};

/// Chi-square 95% quantile for 2 degrees of freedom.
const CHI2_2DOF_95: f64 = 5.99;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
    #[error("source has {got} cameras, rig has {expected}")]
    CameraCount { expected: usize, got: usize },
    #[error("frame timestamps must increase: {0}")]
    Timestamps(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Uninitialized,
    Tracking,
    Lost,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Uninitialized => "uninitialized",
            Status::Tracking => "tracking",
            Status::Lost => "lost",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every threshold of the state machine. Defaults are documented per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Multi-view features needed to initialize from a single frame (50).
    pub tau_init: usize,
    /// Verified map matches needed to keep tracking (30).
    pub tau_track: usize,
    /// A keyframe is inserted when the tracked fraction of the last
    /// keyframe's landmarks drops below this (0.6).
    pub tau_kf: f64,
    /// Keyframes optimized by windowed bundle adjustment (7).
    pub window: usize,
    /// Median ray angle required for two-frame initialization, degrees (1).
    pub init_parallax_deg: f64,
    /// Correspondences needed to attempt two-frame initialization (60).
    pub init_min_matches: usize,
    /// RANSAC inlier fraction a two-frame initialization must reach (0.5).
    pub init_min_inlier_ratio: f64,
    /// Largest relative uncertainty of the metric baseline accepted by a
    /// multi-camera two-frame initialization (0.1).
    pub init_max_scale_spread: f64,
    /// Minimum ray angle for a new inter-frame landmark, degrees (1).
    pub triangulation_parallax_deg: f64,
    /// Local-map step runs when motion since the last keyframe exceeds
    /// this translation, meters (0.02) ...
    pub motion_translation: f64,
    /// ... or this rotation, degrees (1).
    pub motion_rotation_deg: f64,
    /// Hamming acceptance for map and inter-frame matches (64).
    pub match_max_hamming: u32,
    /// Lowe ratio for map and inter-frame matches (0.8).
    pub match_ratio: f64,
    /// Search radius around predicted projections, pixels (15).
    pub search_radius_px: f64,
    /// Radius multiplier for the retry when the first search is short (6).
    pub wide_search_factor: f64,
    /// Keyframes beyond the last one consulted by the local-map step (5).
    pub neighbor_keyframes: usize,
    /// Pixel noise of an octave-0 keypoint (1).
    pub pixel_sigma: f64,
    /// Per-octave noise scale (1.2).
    pub octave_scale: f64,
    /// RANSAC iteration cap (200).
    pub ransac_iterations: usize,
    /// RANSAC confidence for the adaptive iteration count (0.99).
    pub ransac_confidence: f64,
    /// Largest RMS angular error of an accepted tracking pose, radians (0.01).
    pub max_rms_angle: f64,
    /// Levenberg-Marquardt iterations per windowed optimization (10).
    pub ba_iterations: usize,
    /// Observations above this reprojection error after optimization are
    /// dropped, pixels (5).
    pub ba_outlier_px: f64,
    /// Huber threshold, pixels (2).
    pub huber_delta: f64,
    /// Keep extrinsics fixed during optimization (true).
    pub freeze_extrinsics: bool,
    /// Landmarks unseen in this many recent keyframes ... (3)
    pub cull_window: usize,
    /// ... with fewer observations than this are removed (3).
    pub cull_min_observations: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Overlap-map cell padding (1).
    pub overlap_padding: usize,
    /// Intra-frame cross-camera matching.
    pub intra: MatchConfig,
    /// Seed of every random choice (RANSAC).
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_init: 50,
            tau_track: 30,
            tau_kf: 0.6,
            window: 7,
            init_parallax_deg: 1.0,
            init_min_matches: 60,
            init_min_inlier_ratio: 0.5,
            init_max_scale_spread: 0.1,
            triangulation_parallax_deg: 1.0,
            motion_translation: 0.02,
            motion_rotation_deg: 1.0,
            match_max_hamming: 64,
            match_ratio: 0.8,
            search_radius_px: 15.0,
            wide_search_factor: 6.0,
            neighbor_keyframes: 5,
            pixel_sigma: 1.0,
            octave_scale: 1.2,
            ransac_iterations: 200,
            ransac_confidence: 0.99,
            max_rms_angle: 0.01,
            ba_iterations: 10,
            ba_outlier_px: 5.0,
            huber_delta: 2.0,
            freeze_extrinsics: true,
            cull_window: 3,
            cull_min_observations: 3,
            grid_rows: crate::overlap::DEFAULT_GRID_ROWS,
            grid_cols: crate::overlap::DEFAULT_GRID_COLS,
            overlap_padding: crate::overlap::DEFAULT_PADDING,
            intra: MatchConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.tau_track < 4 {
            return bad("tau_track must be at least 4");
        }
        if !(self.tau_kf > 0.0 && self.tau_kf <= 1.0) {
            return bad("tau_kf must be in (0, 1]");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.init_min_matches < 17 {
            return bad("init_min_matches must be at least 17");
        }
        if !(self.init_min_inlier_ratio >= 0.0 && self.init_min_inlier_ratio <= 1.0) {
            return bad("init_min_inlier_ratio must be in [0, 1]");
        }
        if !(self.init_max_scale_spread > 0.0) {
            return bad("init_max_scale_spread must be positive");
        }
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) || !(self.intra.ratio > 0.0 && self.intra.ratio <= 1.0) {
            return bad("ratios must be in (0, 1]");
        }
        let positive = [
            self.init_parallax_deg,
            self.triangulation_parallax_deg,
            self.search_radius_px,
            self.pixel_sigma,
            self.octave_scale,
            self.max_rms_angle,
            self.ba_outlier_px,
            self.huber_delta,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("angles, radii, sigmas and thresholds must be positive");
        }
        if self.wide_search_factor < 1.0 {
            return bad("wide_search_factor must be at least 1");
        }
        if self.motion_translation < 0.0 || self.motion_rotation_deg < 0.0 {
            return bad("motion thresholds must be non-negative");
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) || self.ransac_iterations == 0 {
            return bad("ransac confidence must be in (0, 1) with at least one iteration");
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid must have at least one cell");
        }
        Ok(())
    }

    fn sigma(&self, octave: u8) -> f64 {
        self.pixel_sigma * self.octave_scale.powi(octave as i32)
    }

    fn inlier_px(&self) -> f64 {
        CHI2_2DOF_95.sqrt() * self.pixel_sigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkObservation {
    pub keyframe: u64,
    pub camera: usize,
    /// Index into the keyframe's `frame.keypoints[camera]`.
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
    pub octave: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapLandmark {
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    pub observations: Vec<LandmarkObservation>,
    descriptors: Vec<Descriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub timestamp: f64,
    /// `world_T_body`.
    pub pose: Pose<f64>,
    pub frame: MultiCameraFrame,
    /// `(camera, keypoint index)` to landmark id.
    pub observations: BTreeMap<(usize, usize), u64>,
}

impl Keyframe {
    pub fn landmark_ids(&self) -> BTreeSet<u64> {
        self.observations.values().copied().collect()
    }
}

/// One row of the run log.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLog {
    pub frame_id: u64,
    pub timestamp: f64,
    pub status: Status,
    pub pose: Option<Pose<f64>>,
    pub n_multiview: usize,
    pub n_mono: usize,
    pub n_matches: usize,
    pub inlier_ratio: f64,
    pub keyframe: bool,
    pub ms_feature: f64,
    pub ms_track: f64,
    pub ms_backend: f64,
}

pub const RUN_LOG_HEADER: &str = "frame_id,status,n_multiview,n_mono,n_matches,inlier_ratio,ms_feature,ms_track,ms_backend";

pub fn write_run_log<W: Write>(mut w: W, log: &[FrameLog]) -> std::io::Result<()> {
    writeln!(w, "{RUN_LOG_HEADER}")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{:.4},{:.3},{:.3},{:.3}",
            r.frame_id, r.status, r.n_multiview, r.n_mono, r.n_matches, r.inlier_ratio, r.ms_feature, r.ms_track, r.ms_backend
        )?;
    }
    Ok(())
}

/// Maximal runs of frames, after the first tracked frame, whose status is
/// not `Tracking`, as inclusive `(first, last)` frame ids.
pub fn lost_intervals(log: &[FrameLog]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut seen_tracking = false;
    let mut open: Option<(u64, u64)> = None;
    for r in log {
        if r.status == Status::Tracking {
            seen_tracking = true;
            if let Some(iv) = open.take() {
                out.push(iv);
            }
        } else if seen_tracking {
            open = Some(match open {
                Some((a, _)) => (a, r.frame_id),
                None => (r.frame_id, r.frame_id),
            });
        }
    }
    out.extend(open);
    out
}

/// A frame keypoint matched to a map landmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapMatch {
    pub landmark: u64,
    pub camera: usize,
    /// Index into the frame's `keypoints[camera]`.
    pub keypoint: usize,
    pub distance: u32,
}

/// Keypoints of one camera bucketed on a square grid for radius queries.
struct PixelIndex {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl PixelIndex {
    fn new(kps: &[Keypoint], width: u32, height: u32, cell: f64) -> Self {
        let cols = ((width as f64 / cell).ceil() as usize).max(1);
        let rows = ((height as f64 / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, k) in kps.iter().enumerate() {
            let c = ((k.pixel.x / cell) as usize).min(cols - 1);
            let r = ((k.pixel.y / cell) as usize).min(rows - 1);
            buckets[r * cols + c].push(i);
        }
        Self { cell, cols, rows, buckets }
    }

    fn query(&self, u: &Vector2<f64>, radius: f64, mut f: impl FnMut(usize)) {
        let lo = |v: f64, n: usize| (((v - radius) / self.cell).floor().max(0.0) as usize).min(n - 1);
        let hi = |v: f64, n: usize| (((v + radius) / self.cell).floor().max(0.0) as usize).min(n - 1);
        for r in lo(u.y, self.rows)..=hi(u.y, self.rows) {
            for c in lo(u.x, self.cols)..=hi(u.x, self.cols) {
                self.buckets[r * self.cols + c].iter().for_each(|&i| f(i));
            }
        }
    }
}

/// Best and second-best Hamming distance bookkeeping for a ratio test.
#[derive(Clone, Copy)]
struct Best {
    best: Option<(u32, usize)>,
    second: u32,
}

impl Best {
    fn new() -> Self {
        Self {
            best: None,
            second: u32::MAX,
        }
    }

    fn offer(&mut self, d: u32, i: usize) {
        match self.best {
            Some((b, _)) if d >= b => self.second = self.second.min(d),
            Some((b, _)) => {
                self.second = b;
                self.best = Some((d, i));
            }
            None => self.best = Some((d, i)),
        }
    }

    fn accept(&self, max: u32, ratio: f64) -> Option<(u32, usize)> {
        let (d, i) = self.best?;
        (d <= max && (self.second == u32::MAX || (d as f64) < ratio * self.second as f64)).then_some((d, i))
    }
}

/// Greedy one-to-one assignment by ascending distance.
fn unique_matches(mut cands: Vec<MapMatch>) -> Vec<MapMatch> {
    cands.sort_by_key(|m| (m.distance, m.landmark, m.camera, m.keypoint));
    let mut kp_used = BTreeSet::new();
    let mut lm_used = BTreeSet::new();
    let mut out: Vec<MapMatch> = cands
        .into_iter()
        .filter(|m| kp_used.insert((m.camera, m.keypoint)) && lm_used.insert((m.landmark, m.camera)))
        .collect();
    out.sort_by_key(|m| (m.landmark, m.camera, m.keypoint));
    out
}

/// Same-camera correspondence between two frames: `(camera, index in a, index in b)`.
type FramePair = (usize, usize, usize);

/// Brute-force same-camera descriptor matching with ratio test, optionally
/// restricted by per-keypoint masks.
fn match_frames(
    a: &MultiCameraFrame,
    b: &MultiCameraFrame,
    max_hamming: u32,
    ratio: f64,
    usable_a: impl Fn(usize, usize) -> bool,
    usable_b: impl Fn(usize, usize) -> bool,
) -> Vec<FramePair> {
    let mut out = Vec::new();
    for c in 0..a.keypoints.len().min(b.keypoints.len()) {
        let mut cands = Vec::new();
        for (ib, kb) in b.keypoints[c].iter().enumerate() {
            if !usable_b(c, ib) {
                continue;
            }
            let mut best = Best::new();
            for (ia, ka) in a.keypoints[c].iter().enumerate() {
                if usable_a(c, ia) {
                    best.offer(ka.descriptor.hamming(&kb.descriptor), ia);
                }
            }
            if let Some((d, ia)) = best.accept(max_hamming, ratio) {
                cands.push((d, ia, ib));
            }
        }
        cands.sort();
        let mut used_a = BTreeSet::new();
        let mut pairs: Vec<FramePair> = cands
            .into_iter()
            .filter(|(_, ia, _)| used_a.insert(*ia))
            .map(|(_, ia, ib)| (c, ia, ib))
            .collect();
        pairs.sort();
        out.extend(pairs);
    }
    out
}

/// The SLAM state machine. Owns the map and emits one [`FrameLog`] per frame.
#[derive(Clone, Debug)]
pub struct SlamSystem {
    config: PipelineConfig,
    rig: RigCalibration,
    overlap: OverlapMap,
    status: Status,
    landmarks: BTreeMap<u64, MapLandmark>,
    keyframes: Vec<Keyframe>,
    /// Keyframes of maps discarded by a reset, for the keyframe trajectory.
    retired_keyframes: Vec<(f64, Pose<f64>)>,
    next_landmark: u64,
    next_keyframe: u64,
    last_pose: Pose<f64>,
    /// `last_pose^-1 * pose` of the most recent tracked step.
    velocity: Pose<f64>,
    /// Pose given to the first keyframe of the next map.
    anchor: Pose<f64>,
    reference: Option<MultiCameraFrame>,
    last_timestamp: Option<f64>,
    ms_backend: f64,
}

impl SlamSystem {
    pub fn new(rig: RigCalibration, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let overlap = compute_overlap_map_with_padding(
            &rig,
            Grid::new(config.grid_rows, config.grid_cols),
            config.overlap_padding,
        )?;
        Ok(Self {
            config,
            rig,
            overlap,
            status: Status::Uninitialized,
            landmarks: BTreeMap::new(),
            keyframes: Vec::new(),
            retired_keyframes: Vec::new(),
            next_landmark: 0,
            next_keyframe: 0,
            last_pose: Pose::identity(),
            velocity: Pose::identity(),
            anchor: Pose::identity(),
            reference: None,
            last_timestamp: None,
            ms_backend: 0.0,
        })
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn rig(&self) -> &RigCalibration {
        &self.rig
    }

    pub fn overlap(&self) -> &OverlapMap {
        &self.overlap
    }

    pub fn landmarks(&self) -> &BTreeMap<u64, MapLandmark> {
        &self.landmarks
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn last_pose(&self) -> &Pose<f64> {
        &self.last_pose
    }

    /// Keyframe poses of the current and every discarded map, by time.
    pub fn keyframe_trajectory(&self) -> Trajectory<f64> {
        let mut all = self.retired_keyframes.clone();
        all.extend(self.keyframes.iter().map(|k| (k.timestamp, k.pose)));
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        Trajectory::new(all).expect("keyframe timestamps increase")
    }

    /// Feature extraction followed by [`SlamSystem::process_frame`].
    pub fn process(&mut self, input: &FrameInput) -> Result<FrameLog, PipelineError> {
        let t0 = Instant::now();
        let frame = build_frame(input, &self.rig, &self.overlap, &self.config.intra)?;
        let ms_feature = t0.elapsed().as_secs_f64() * 1e3;
        let mut log = self.process_frame(frame)?;
        log.ms_feature = ms_feature;
        Ok(log)
    }

    pub fn process_frame(&mut self, frame: MultiCameraFrame) -> Result<FrameLog, PipelineError> {
        if let Some(t) = self.last_timestamp {
            if !(frame.timestamp > t) {
                return Err(PipelineError::Timestamps(format!(
                    "frame {} at {} after {}",
                    frame.frame_id, frame.timestamp, t
                )));
            }
        }
        self.last_timestamp = Some(frame.timestamp);
        let t0 = Instant::now();
        self.ms_backend = 0.0;
        let mut log = FrameLog {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            status: self.status,
            pose: None,
            n_multiview: frame.multiview.len(),
            n_mono: frame.mono.len(),
            n_matches: 0,
            inlier_ratio: 0.0,
            keyframe: false,
            ms_feature: 0.0,
            ms_track: 0.0,
            ms_backend: 0.0,
        };
        if self.status == Status::Lost {
            self.reset();
        }
        match self.status {
            Status::Uninitialized => self.initialize(frame, &mut log),
            Status::Tracking => self.track_frame(frame, &mut log),
            Status::Lost => unreachable!("reset above"),
        }
        log.status = self.status;
        log.ms_backend = self.ms_backend;
        log.ms_track = (t0.elapsed().as_secs_f64() * 1e3 - self.ms_backend).max(0.0);
        Ok(log)
    }

    /// Lost -> Uninitialized. The map is discarded; the next map is anchored
    /// at the last tracked pose so the trajectory stays continuous.
    pub fn reset(&mut self) {
        self.retired_keyframes
            .extend(self.keyframes.iter().map(|k| (k.timestamp, k.pose)));
        self.keyframes.clear();
        self.landmarks.clear();
        self.reference = None;
        self.anchor = self.last_pose;
        self.velocity = Pose::identity();
        self.status = Status::Uninitialized;
    }

    /// Single-frame initialization from multi-view features, otherwise
    /// two-frame initialization against a buffered reference frame.
    pub fn initialize(&mut self, frame: MultiCameraFrame, log: &mut FrameLog) {
        debug_assert_eq!(self.status, Status::Uninitialized);
        if frame.multiview.len() >= self.config.tau_init {
            let pose = self.anchor;
            let kf = self.push_keyframe(frame, pose);
            self.add_multiview_landmarks(kf);
            self.start_tracking(pose, log);
            return;
        }
        let Some(reference) = self.reference.take() else {
            self.reference = Some(frame);
            return;
        };
        let pairs = match_frames(
            &reference,
            &frame,
            self.config.match_max_hamming,
            self.config.match_ratio,
            |_, _| true,
            |_, _| true,
        );
        log.n_matches = pairs.len();
        if pairs.len() < self.config.init_min_matches {
            self.reference = Some(frame);
            return;
        }
        let rays = |f: &MultiCameraFrame, c: usize, i: usize| keypoint_ray(&f.keypoints[c][i], &self.rig);
        let mut angles: Vec<f64> = pairs
            .iter()
            .map(|&(c, ia, ib)| rays(&reference, c, ia).direction.angle(&rays(&frame, c, ib).direction))
            .collect();
        angles.sort_by(f64::total_cmp);
        if angles[angles.len() / 2] < self.config.init_parallax_deg.to_radians() {
            // Keep the older reference so parallax can accumulate.
            self.reference = Some(reference);
            return;
        }
        match self.two_frame_init(&reference, &frame, &pairs, log) {
            Ok(()) => {}
            Err(InitFailure::Wait) => self.reference = Some(reference),
            Err(InitFailure::Restart) => self.reference = Some(frame),
        }
    }

    fn two_frame_init(
        &mut self,
        reference: &MultiCameraFrame,
        frame: &MultiCameraFrame,
        pairs: &[FramePair],
        log: &mut FrameLog,
    ) -> Result<(), InitFailure> {
        let cfg = self.ransac_config(frame.frame_id);
        let (b_t_a, inliers) = if self.rig.num_cameras() == 1 {
            let k = self.rig.camera(0).intrinsics;
            let corrs: Vec<PixelCorrespondence<f64>> = pairs
                .iter()
                .map(|&(c, ia, ib)| PixelCorrespondence {
                    a: reference.keypoints[c][ia].pixel,
                    b: frame.keypoints[c][ib].pixel,
                })
                .collect();
            let res = ransac(&MonoRelativePoseEstimator { intrinsics: k }, &corrs, &cfg)?;
            let inl: Vec<_> = corrs.iter().zip(&res.inliers).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
            let pose = solve_rel_pose_mono_with(&inl, &k, DEFAULT_MIN_PARALLAX_DEG.to_radians())?;
            (pose, res.inliers)
        } else {
            let corrs: Vec<RayCorrespondence<f64>> = pairs
                .iter()
                .map(|&(c, ia, ib)| {
                    let center = *self.rig.camera(c).body_t_cam.translation();
                    RayCorrespondence::with_centers(
                        keypoint_ray(&reference.keypoints[c][ia], &self.rig),
                        center,
                        keypoint_ray(&frame.keypoints[c][ib], &self.rig),
                        center,
                    )
                })
                .collect();
            let est = GeneralizedRelativePoseEstimator {
                focal_px: self.focal_px(),
            };
            let res = ransac(&est, &corrs, &cfg)?;
            let inl: Vec<_> = corrs.iter().zip(&res.inliers).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
            let pose = solve_rel_pose_generalized(&inl).unwrap_or(res.model);
            // Straight-line motion seen only within each camera fixes the
            // direction of travel but not its length; wait for rotation.
            if translation_scale_spread(&pose, &inl) > self.config.init_max_scale_spread {
                return Err(InitFailure::Wait);
            }
            (pose, res.inliers)
        };
        log.inlier_ratio = inliers.iter().filter(|m| **m).count() as f64 / pairs.len() as f64;
        if log.inlier_ratio < self.config.init_min_inlier_ratio {
            return Err(InitFailure::Restart);
        }

        let pose_a = self.anchor;
        let pose_b = pose_a.compose(&b_t_a.inverse());
        let mut points = Vec::new();
        for (&(c, ia, ib), ok) in pairs.iter().zip(&inliers) {
            if !ok {
                continue;
            }
            let ka = reference.keypoints[c][ia];
            let kb = frame.keypoints[c][ib];
            if let Some(p) = self.triangulate_pair(&ka, &pose_a, &kb, &pose_b) {
                points.push((c, ia, ib, p));
            }
        }
        if points.len() < self.config.tau_track {
            return Err(InitFailure::Restart);
        }
        let kf_a = self.push_keyframe(reference.clone(), pose_a);
        let kf_b = self.push_keyframe(frame.clone(), pose_b);
        for (c, ia, ib, p) in points {
            let id = self.new_landmark(p);
            self.observe(id, kf_a, c, ia);
            self.observe(id, kf_b, c, ib);
        }
        self.run_backend(None);
        if self.rig.num_cameras() == 1 {
            self.normalize_scale();
        }
        let pose = self.keyframes.last().expect("two keyframes").pose;
        self.start_tracking(pose, log);
        Ok(())
    }
}

/// Why a two-frame initialization attempt failed, deciding which frame
/// becomes the next reference.
enum InitFailure {
    /// Too little parallax or scale information yet: keep the reference.
    Wait,
    /// The pair is unusable: start over from the newer frame.
    Restart,
}

impl From<SolverError> for InitFailure {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::LowParallax { .. } => InitFailure::Wait,
            _ => InitFailure::Restart,
        }
    }
}

impl SlamSystem {
    /// Scales the map about the anchor so the two initial keyframes are one
    /// unit apart.
    fn normalize_scale(&mut self) {
        let (a, b) = (self.keyframes[0].pose, self.keyframes[1].pose);
        let d = (b.translation() - a.translation()).norm();
        if !(d > 0.0) {
            return;
        }
        let s = 1.0 / d;
        let origin = *a.translation();
        let scale = |p: &Vector3<f64>| origin + (p - origin) * s;
        for kf in &mut self.keyframes {
            kf.pose = Pose::new(*kf.pose.rotation(), scale(kf.pose.translation()));
        }
        for l in self.landmarks.values_mut() {
            l.position = scale(&l.position);
        }
    }

    fn start_tracking(&mut self, pose: Pose<f64>, log: &mut FrameLog) {
        self.status = Status::Tracking;
        self.last_pose = pose;
        self.velocity = Pose::identity();
        self.reference = None;
        log.pose = Some(pose);
        log.keyframe = true;
        log.n_matches = log.n_matches.max(self.landmarks.len());
        if log.inlier_ratio == 0.0 {
            log.inlier_ratio = 1.0;
        }
    }

    /// Tracks a frame against the last keyframe, refines with the local map
    /// and inserts a keyframe when too few of its landmarks remain tracked.
    pub fn track_frame(&mut self, frame: MultiCameraFrame, log: &mut FrameLog) {
        debug_assert_eq!(self.status, Status::Tracking);
        let last_kf = self.keyframes.last().expect("tracking implies a keyframe");
        let kf_landmarks = last_kf.landmark_ids();
        let kf_pose = last_kf.pose;
        let indices = self.pixel_indices(&frame);
        let predicted = self.last_pose.compose(&self.velocity);

        let none = BTreeSet::new();
        let ids: Vec<u64> = kf_landmarks.iter().copied().collect();
        let r = self.config.search_radius_px;
        let mut matches = self.match_landmarks(&frame, &indices, &predicted, &ids, r, &none);
        if matches.len() < self.config.tau_track {
            matches = self.match_landmarks(&frame, &indices, &predicted, &ids, r * self.config.wide_search_factor, &none);
        }
        log.n_matches = matches.len();
        if matches.len() < self.config.tau_track {
            self.status = Status::Lost;
            return;
        }
        let Some((mut pose, mut inliers)) = self.solve_pose_ransac(&frame, &matches, &predicted) else {
            self.status = Status::Lost;
            return;
        };
        log.inlier_ratio = inliers.len() as f64 / matches.len() as f64;
        if inliers.len() < self.config.tau_track {
            log.n_matches = inliers.len();
            self.status = Status::Lost;
            return;
        }

        if self.significant_motion(&kf_pose, &pose) {
            let neighbors = self.covisible_keyframes(self.keyframes.len() - 1, self.config.neighbor_keyframes);
            let matched: BTreeSet<u64> = inliers.iter().map(|m| m.landmark).collect();
            let extra_ids: Vec<u64> = neighbors
                .iter()
                .flat_map(|&k| self.keyframes[k].observations.values().copied())
                .filter(|l| !matched.contains(l))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let used: BTreeSet<(usize, usize)> = inliers.iter().map(|m| (m.camera, m.keypoint)).collect();
            let extra = self.match_landmarks(&frame, &indices, &pose, &extra_ids, r, &used);
            if !extra.is_empty() {
                let mut all = inliers.clone();
                all.extend(extra);
                if let Some((p, inl)) = self.refine_pose(&frame, &all, &pose) {
                    if inl.len() >= inliers.len() {
                        pose = p;
                        inliers = inl;
                    }
                }
            }
        }
        log.n_matches = inliers.len();
        log.pose = Some(pose);
        let tracked = inliers
            .iter()
            .map(|m| m.landmark)
            .filter(|l| kf_landmarks.contains(l))
            .collect::<BTreeSet<_>>()
            .len();
        let ratio = tracked as f64 / kf_landmarks.len().max(1) as f64;
        self.velocity = self.last_pose.inverse().compose(&pose);
        self.last_pose = pose;
        if ratio < self.config.tau_kf {
            self.insert_keyframe(frame, pose, &inliers);
            log.keyframe = true;
            log.pose = Some(self.last_pose);
        }
    }

    fn significant_motion(&self, a: &Pose<f64>, b: &Pose<f64>) -> bool {
        (b.translation() - a.translation()).norm() > self.config.motion_translation
            || a.angle_to(b) > self.config.motion_rotation_deg.to_radians()
    }

    /// Indices of up to `n` keyframes sharing the most landmarks with
    /// keyframe `k` (ties to the most recent).
    fn covisible_keyframes(&self, k: usize, n: usize) -> Vec<usize> {
        let mine = self.keyframes[k].landmark_ids();
        let mut scored: Vec<(usize, usize)> = self
            .keyframes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(i, kf)| (kf.observations.values().filter(|l| mine.contains(l)).count(), i))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        scored.into_iter().take(n).map(|(_, i)| i).collect()
    }

    fn pixel_indices(&self, frame: &MultiCameraFrame) -> Vec<PixelIndex> {
        frame
            .keypoints
            .iter()
            .enumerate()
            .map(|(c, kps)| {
                let k = &self.rig.camera(c).intrinsics;
                PixelIndex::new(kps, k.width, k.height, self.config.search_radius_px.max(8.0))
            })
            .collect()
    }

    /// Projects landmarks with `pose` and matches each, per camera, to the
    /// best keypoint within `radius`.
    fn match_landmarks(
        &self,
        frame: &MultiCameraFrame,
        indices: &[PixelIndex],
        pose: &Pose<f64>,
        ids: &[u64],
        radius: f64,
        used: &BTreeSet<(usize, usize)>,
    ) -> Vec<MapMatch> {
        let mut cands = Vec::new();
        for id in ids {
            let Some(lm) = self.landmarks.get(id) else { continue };
            let pb = pose.inverse_transform_point(&lm.position);
            for (c, cam) in self.rig.cameras().iter().enumerate() {
                let pc = cam.body_t_cam.inverse_transform_point(&pb);
                let Ok(u) = cam.intrinsics.project(&pc) else { continue };
                if !cam.intrinsics.contains(&u) {
                    continue;
                }
                let mut best = Best::new();
                let kps = &frame.keypoints[c];
                indices[c].query(&u, radius, |i| {
                    if !used.contains(&(c, i)) && (kps[i].pixel - u).norm_squared() <= radius * radius {
                        best.offer(lm.descriptor.hamming(&kps[i].descriptor), i);
                    }
                });
                if let Some((d, i)) = best.accept(self.config.match_max_hamming, self.config.match_ratio) {
                    cands.push(MapMatch {
                        landmark: *id,
                        camera: c,
                        keypoint: i,
                        distance: d,
                    });
                }
            }
        }
        unique_matches(cands)
    }

    fn ray_point_matches(&self, frame: &MultiCameraFrame, matches: &[MapMatch]) -> Vec<RayPointMatch<f64>> {
        matches
            .iter()
            .map(|m| RayPointMatch {
                point_world: self.landmarks[&m.landmark].position,
                ray: keypoint_ray(&frame.keypoints[m.camera][m.keypoint], &self.rig),
            })
            .collect()
    }

    fn focal_px(&self) -> f64 {
        let n = self.rig.num_cameras() as f64;
        self.rig.cameras().iter().map(|c| c.intrinsics.fx).sum::<f64>() / n
    }

    fn ransac_config(&self, frame_id: u64) -> RansacConfig {
        RansacConfig {
            max_iterations: self.config.ransac_iterations,
            inlier_threshold: self.config.inlier_px(),
            confidence: self.config.ransac_confidence,
            seed: self.config.seed ^ frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        }
    }

    fn gpnp_options(&self) -> GpnpOptions {
        GpnpOptions {
            max_rms_angle: self.config.max_rms_angle,
            ..GpnpOptions::default()
        }
    }

    /// gPnP inside RANSAC, then a final solve on the consensus set.
    fn solve_pose_ransac(
        &self,
        frame: &MultiCameraFrame,
        matches: &[MapMatch],
        predicted: &Pose<f64>,
    ) -> Option<(Pose<f64>, Vec<MapMatch>)> {
        let data = self.ray_point_matches(frame, matches);
        let est = GpnpEstimator::new(predicted.inverse(), self.focal_px());
        let res = ransac(&est, &data, &self.ransac_config(frame.frame_id)).ok()?;
        let inliers: Vec<MapMatch> = matches
            .iter()
            .zip(&res.inliers)
            .filter(|(_, m)| **m)
            .map(|(m, _)| *m)
            .collect();
        let inlier_data: Vec<_> = data.iter().zip(&res.inliers).filter(|(_, m)| **m).map(|(d, _)| *d).collect();
        let sol = solve_gpnp(&inlier_data, &res.model, &self.gpnp_options()).ok()?;
        Some((sol.pose.inverse(), inliers))
    }

    /// Keeps matches consistent with `pose` and re-solves from it.
    fn refine_pose(
        &self,
        frame: &MultiCameraFrame,
        matches: &[MapMatch],
        pose: &Pose<f64>,
    ) -> Option<(Pose<f64>, Vec<MapMatch>)> {
        let data = self.ray_point_matches(frame, matches);
        let est = GpnpEstimator::new(pose.inverse(), self.focal_px());
        let b_t_w = pose.inverse();
        let thr = self.config.inlier_px();
        let keep: Vec<bool> = data
            .iter()
            .map(|d| crate::solvers::Estimator::residual(&est, &b_t_w, d) <= thr)
            .collect();
        let inl_data: Vec<_> = data.iter().zip(&keep).filter(|(_, k)| **k).map(|(d, _)| *d).collect();
        let inl: Vec<_> = matches.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| *m).collect();
        let sol = solve_gpnp(&inl_data, &b_t_w, &self.gpnp_options()).ok()?;
        Some((sol.pose.inverse(), inl))
    }

    /// Two-view triangulation in the world frame with parallax, depth and
    /// reprojection gates.
    fn triangulate_pair(&self, ka: &Keypoint, pose_a: &Pose<f64>, kb: &Keypoint, pose_b: &Pose<f64>) -> Option<Vector3<f64>> {
        let ra: PluckerRay<f64> = keypoint_ray(ka, &self.rig).transform(pose_a);
        let rb: PluckerRay<f64> = keypoint_ray(kb, &self.rig).transform(pose_b);
        let p = triangulate(&[ra, rb], self.config.triangulation_parallax_deg.to_radians()).ok()?;
        for (k, pose) in [(ka, pose_a), (kb, pose_b)] {
            let cam = self.rig.camera(k.camera_index);
            let pc = cam.body_t_cam.inverse_transform_point(&pose.inverse_transform_point(&p));
            let u = cam.intrinsics.project(&pc).ok()?;
            if (u - k.pixel).norm() > self.config.inlier_px() * self.config.sigma(k.octave) / self.config.pixel_sigma {
                return None;
            }
        }
        Some(p)
    }

    fn push_keyframe(&mut self, frame: MultiCameraFrame, pose: Pose<f64>) -> usize {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        self.keyframes.push(Keyframe {
            id,
            timestamp: frame.timestamp,
            pose,
            frame,
            observations: BTreeMap::new(),
        });
        self.keyframes.len() - 1
    }

    fn new_landmark(&mut self, position: Vector3<f64>) -> u64 {
        let id = self.next_landmark;
        self.next_landmark += 1;
        self.landmarks.insert(
            id,
            MapLandmark {
                position,
                descriptor: Descriptor::default(),
                observations: Vec::new(),
                descriptors: Vec::new(),
            },
        );
        id
    }

    /// Records that keyframe index `kf` sees landmark `id` at a keypoint.
    fn observe(&mut self, id: u64, kf: usize, camera: usize, keypoint: usize) {
        let keyframe = &mut self.keyframes[kf];
        let kp = keyframe.frame.keypoints[camera][keypoint];
        if keyframe.observations.insert((camera, keypoint), id).is_some() {
            debug_assert!(false, "keypoint observed twice");
        }
        let lm = self.landmarks.get_mut(&id).expect("landmark exists");
        lm.observations.push(LandmarkObservation {
            keyframe: keyframe.id,
            camera,
            keypoint,
            pixel: kp.pixel,
            octave: kp.octave,
        });
        lm.descriptors.push(kp.descriptor);
        lm.descriptor = representative_descriptor(&lm.descriptors);
    }

    /// Multi-view features of keyframe index `kf` with no map association
    /// become landmarks directly.
    fn add_multiview_landmarks(&mut self, kf: usize) {
        let pose = self.keyframes[kf].pose;
        let feats: Vec<(Vector3<f64>, Vec<(usize, usize)>)> = {
            let keyframe = &self.keyframes[kf];
            let index: BTreeMap<(usize, u64), usize> = keyframe
                .frame
                .keypoints
                .iter()
                .enumerate()
                .flat_map(|(c, kps)| kps.iter().enumerate().map(move |(i, k)| ((c, k.id), i)))
                .collect();
            keyframe
                .frame
                .multiview
                .iter()
                .filter_map(|mv| {
                    let members: Vec<(usize, usize)> = mv
                        .keypoints
                        .iter()
                        .filter_map(|k| index.get(&(k.camera_index, k.id)).map(|&i| (k.camera_index, i)))
                        .collect();
                    let fresh = members.len() == mv.keypoints.len()
                        && members.iter().all(|m| !keyframe.observations.contains_key(m));
                    fresh.then(|| (pose.transform_point(&mv.point_body), members))
                })
                .collect()
        };
        for (p, members) in feats {
            let id = self.new_landmark(p);
            for (c, i) in members {
                self.observe(id, kf, c, i);
            }
        }
    }

    /// Appends tracked observations, creates landmarks from unassociated
    /// multi-view features and from new matches against the previous
    /// keyframe, then runs windowed optimization and culling.
    pub fn insert_keyframe(&mut self, frame: MultiCameraFrame, pose: Pose<f64>, matches: &[MapMatch]) {
        let prev = self.keyframes.len() - 1;
        let kf = self.push_keyframe(frame, pose);
        for m in matches {
            if self.landmarks.contains_key(&m.landmark) && !self.keyframes[kf].observations.contains_key(&(m.camera, m.keypoint)) {
                self.observe(m.landmark, kf, m.camera, m.keypoint);
            }
        }
        self.add_multiview_landmarks(kf);

        let (a, b) = (&self.keyframes[prev], &self.keyframes[kf]);
        let pairs = match_frames(
            &a.frame,
            &b.frame,
            self.config.match_max_hamming,
            self.config.match_ratio,
            |c, i| !a.observations.contains_key(&(c, i)),
            |c, i| !b.observations.contains_key(&(c, i)),
        );
        let (pose_a, pose_b) = (a.pose, b.pose);
        let new: Vec<(usize, usize, usize, Vector3<f64>)> = pairs
            .into_iter()
            .filter_map(|(c, ia, ib)| {
                let (ka, kb) = (&a.frame.keypoints[c][ia], &b.frame.keypoints[c][ib]);
                self.triangulate_pair(ka, &pose_a, kb, &pose_b).map(|p| (c, ia, ib, p))
            })
            .collect();
        for (c, ia, ib, p) in new {
            let id = self.new_landmark(p);
            self.observe(id, prev, c, ia);
            self.observe(id, kf, c, ib);
        }

        let n = self.keyframes.len();
        let active: BTreeSet<u64> = self.keyframes[n.saturating_sub(self.config.window)..]
            .iter()
            .map(|k| k.id)
            .collect();
        self.run_backend(Some(&active));
        self.cull();
        self.last_pose = self.keyframes.last().expect("just inserted").pose;
    }

    fn build_graph(&self) -> FactorGraph {
        let extrinsics = self.rig.cameras().iter().map(|c| c.body_t_cam).collect();
        let intrinsics = self.rig.cameras().iter().map(|c| c.intrinsics).collect();
        let mut g = FactorGraph::new(extrinsics, intrinsics, self.rig.body_camera_index());
        for kf in &self.keyframes {
            g.poses.insert(kf.id, PoseVariable { pose: kf.pose, fixed: false });
        }
        for (id, lm) in &self.landmarks {
            g.landmarks.insert(*id, LandmarkVariable { position: lm.position, fixed: false });
            for o in &lm.observations {
                g.factors.push(ReprojectionFactor {
                    keyframe: o.keyframe,
                    camera: o.camera,
                    landmark: *id,
                    measurement: o.pixel,
                    sigma: self.config.sigma(o.octave),
                });
            }
        }
        if let Some(first) = self.keyframes.first() {
            g.prior = Some((
                first.id,
                PosePrior {
                    pose: first.pose,
                    sigma_rotation: 1e-6,
                    sigma_translation: 1e-6,
                },
            ));
        }
        g
    }

    /// Optimizes the keyframes in `active` (all when `None`) and writes the
    /// result back, dropping observations that remain outliers.
    fn run_backend(&mut self, active: Option<&BTreeSet<u64>>) {
        let t0 = Instant::now();
        let full = self.build_graph();
        let mut graph = match active {
            Some(a) => match marginal_window(&full, a) {
                Ok(g) => g,
                Err(_) => return,
            },
            None => full,
        };
        let opts = OptimizeOptions {
            max_iters: self.config.ba_iterations,
            freeze_extrinsics: self.config.freeze_extrinsics,
            huber_delta: self.config.huber_delta,
            ..OptimizeOptions::default()
        };
        if optimize(&mut graph, &opts).is_ok() {
            for kf in &mut self.keyframes {
                if let Some(v) = graph.poses.get(&kf.id) {
                    if !v.fixed {
                        kf.pose = v.pose;
                    }
                }
            }
            for (id, v) in &graph.landmarks {
                if let Some(lm) = self.landmarks.get_mut(id) {
                    lm.position = v.position;
                }
            }
            if !self.config.freeze_extrinsics {
                self.rig = self.rig.with_extrinsics(&graph.extrinsics);
            }
            let outliers: Vec<(u64, u64, usize)> = graph
                .factors
                .iter()
                .filter(|f| !graph.poses[&f.keyframe].fixed && (graph.residual(f) * f.sigma).norm() > self.config.ba_outlier_px)
                .map(|f| (f.landmark, f.keyframe, f.camera))
                .collect();
            for (l, k, c) in outliers {
                self.remove_observation(l, k, c);
            }
        }
        self.ms_backend += t0.elapsed().as_secs_f64() * 1e3;
    }

    fn keyframe_index(&self, id: u64) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    fn remove_observation(&mut self, landmark: u64, keyframe: u64, camera: usize) {
        let Some(lm) = self.landmarks.get_mut(&landmark) else { return };
        let Some(pos) = lm
            .observations
            .iter()
            .position(|o| o.keyframe == keyframe && o.camera == camera)
        else {
            return;
        };
        let o = lm.observations.remove(pos);
        lm.descriptors.remove(pos);
        if lm.observations.is_empty() {
            self.landmarks.remove(&landmark);
        } else {
            lm.descriptor = representative_descriptor(&lm.descriptors);
        }
        if let Some(k) = self.keyframe_index(keyframe) {
            self.keyframes[k].observations.remove(&(o.camera, o.keypoint));
        }
    }

    /// Removes landmarks unseen in the last `cull_window` keyframes that have
    /// fewer than `cull_min_observations` observations.
    fn cull(&mut self) {
        let n = self.keyframes.len();
        if n <= self.config.cull_window {
            return;
        }
        let recent: BTreeSet<u64> = self.keyframes[n - self.config.cull_window..].iter().map(|k| k.id).collect();
        let doomed: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|(_, l)| {
                l.observations.len() < self.config.cull_min_observations
                    && !l.observations.iter().any(|o| recent.contains(&o.keyframe))
            })
            .map(|(id, _)| *id)
            .collect();
        for id in doomed {
            let lm = self.landmarks.remove(&id).expect("listed");
            for o in lm.observations {
                if let Some(k) = self.keyframe_index(o.keyframe) {
                    self.keyframes[k].observations.remove(&(o.camera, o.keypoint));
                }
            }
        }
    }
}

/// Estimated trajectories and per-frame log of one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Pose of every frame with a pose estimate.
    pub trajectory: Trajectory<f64>,
    pub keyframes: Trajectory<f64>,
    pub log: Vec<FrameLog>,
}

/// Runs the pipeline over every frame of a source.
pub fn run_source(
    source: &mut dyn FrameSource,
    rig: &RigCalibration,
    config: &PipelineConfig,
) -> Result<RunOutput, PipelineError> {
    if source.num_cameras() != rig.num_cameras() {
        return Err(PipelineError::CameraCount {
            expected: rig.num_cameras(),
            got: source.num_cameras(),
        });
    }
    let mut slam = SlamSystem::new(rig.clone(), config.clone())?;
    let mut trajectory = Trajectory::new(Vec::new()).expect("empty");
    let mut log = Vec::new();
    while let Some(input) = source.next_frame() {
        let row = slam.process(&input)?;
        if let Some(p) = row.pose {
            trajectory
                .push(row.timestamp, p)
                .map_err(|e| PipelineError::Timestamps(e.to_string()))?;
        }
        log::debug!(
            "frame {} {} matches {} inliers {:.2}",
            row.frame_id,
            row.status,
            row.n_matches,
            row.inlier_ratio
        );
        log.push(row);
    }
    Ok(RunOutput {
        trajectory,
        keyframes: slam.keyframe_trajectory(),
        log,
    })
}
