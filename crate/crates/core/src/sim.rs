//! Synthetic rigs, trajectories and scenes, and a forward model that renders
//! per-camera keypoints with ground-truth landmark labels.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{save_rig, CalibrationError, CameraCalibration, RigCalibration};
use crate::eval::{write_tum, Trajectory};
use crate::features::{write_frame_times, write_tracks, Descriptor, FrameInput, FrameSource, RawKeypoint, DEFAULT_FRAME_PERIOD, FRAMES_FILE, TRACKS_FILE};
use crate::geometry::{Intrinsics, Pose};

/// Keypoint ids at or above this value are outliers or dynamic content.
pub const OUTLIER_ID_BASE: u64 = 1 << 40;

pub const RIG_FILE: &str = "rig.json";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    /// Forward-facing cameras on a line, spaced by the baseline.
    OvLinear,
    /// Cameras on a ring facing outward; {0, 90, -90} degrees for three.
    NOvDivergent,
    Mono,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub kind: RigKind,
    pub n_cameras: usize,
    pub baseline: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            kind: RigKind::OvLinear,
            n_cameras: 2,
            baseline: 0.165,
            fov_deg: 60.0,
            width: 640,
            height: 480,
        }
    }
}

/// Yaw of each camera of a divergent rig.
pub fn divergent_yaws(n: usize) -> Vec<f64> {
    if n == 3 {
        vec![0.0, FRAC_PI_2, -FRAC_PI_2]
    } else {
        (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
    }
}

pub fn make_rig(spec: &RigSpec) -> Result<RigCalibration, SimError> {
    if spec.n_cameras == 0 {
        return Err(SimError::InvalidSpec("n_cameras must be at least 1".into()));
    }
    if spec.kind == RigKind::Mono && spec.n_cameras != 1 {
        return Err(SimError::InvalidSpec("a mono rig has exactly one camera".into()));
    }
    if !(spec.fov_deg > 0.0 && spec.fov_deg < 180.0) || spec.width == 0 || spec.height == 0 {
        return Err(SimError::InvalidSpec("bad field of view or image size".into()));
    }
    if !(spec.baseline > 0.0) && spec.kind != RigKind::Mono {
        return Err(SimError::InvalidSpec("baseline must be positive".into()));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let f = 0.5 * w / (0.5 * spec.fov_deg.to_radians()).tan();
    let k = Intrinsics::new(f, f, 0.5 * w, 0.5 * h, spec.width, spec.height)
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let poses: Vec<Pose<f64>> = match spec.kind {
        RigKind::Mono => vec![Pose::identity()],
        RigKind::OvLinear => (0..spec.n_cameras)
            .map(|i| Pose::from_translation(Vector3::new(spec.baseline * i as f64, 0.0, 0.0)))
            .collect(),
        RigKind::NOvDivergent => {
            // Ring of radius `baseline` centred behind camera 0.
            let r = spec.baseline;
            divergent_yaws(spec.n_cameras)
                .into_iter()
                .map(|yaw| Pose::from_yaw(yaw, Vector3::new(r * yaw.sin(), 0.0, r * yaw.cos() - r)))
                .collect()
        }
    };
    let cameras = poses
        .into_iter()
        .enumerate()
        .map(|(i, body_t_cam)| CameraCalibration {
            id: format!("cam{i}"),
            intrinsics: k,
            body_t_cam,
        })
        .collect();
    Ok(RigCalibration::new(cameras, Some(0))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Plus,
    Square,
    Circle,
    Straight,
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plus" => Ok(Shape::Plus),
            "square" => Ok(Shape::Square),
            "circle" => Ok(Shape::Circle),
            "straight" => Ok(Shape::Straight),
            other => Err(format!("unknown trajectory shape '{other}'")),
        }
    }
}

/// Seconds of in-place turning per radian, relative to the time spent per
/// meter of translation.
const TURN_COST_PER_RAD: f64 = 0.08;

enum Step {
    Move(f64),
    Turn(f64),
}

/// Planar trajectory in the x-z plane (y is down) with the body's z axis
/// tangent to the path.
///
/// Plus and square are polygons whose perimeter is `size`, traversed with
/// in-place turns at the corners; the circle has circumference `size`;
/// closed shapes return to the starting pose.
pub fn make_trajectory(shape: Shape, size: f64, n_frames: usize) -> Result<Vec<Pose<f64>>, SimError> {
    if n_frames < 2 {
        return Err(SimError::InvalidSpec("a trajectory needs at least 2 frames".into()));
    }
    if !(size > 0.0) {
        return Err(SimError::InvalidSpec("trajectory size must be positive".into()));
    }
    let last = (n_frames - 1) as f64;
    if shape == Shape::Circle {
        let r = size / (2.0 * PI);
        return Ok((0..n_frames)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / last;
                let phi = if i == n_frames - 1 { 0.0 } else { phi };
                Pose::from_yaw(phi, Vector3::new(r * (1.0 - phi.cos()), 0.0, r * phi.sin()))
            })
            .collect());
    }
    let steps: Vec<Step> = match shape {
        Shape::Straight => vec![Step::Move(size)],
        Shape::Square => (0..4).flat_map(|_| [Step::Move(size / 4.0), Step::Turn(FRAC_PI_2)]).collect(),
        Shape::Plus => {
            let a = size / 12.0;
            (0..4)
                .flat_map(|_| {
                    [
                        Step::Move(a),
                        Step::Turn(FRAC_PI_2),
                        Step::Move(a),
                        Step::Turn(FRAC_PI_2),
                        Step::Move(a),
                        Step::Turn(-FRAC_PI_2),
                    ]
                })
                .collect()
        }
        Shape::Circle => unreachable!(),
    };
    let cost = |s: &Step| match s {
        Step::Move(l) => *l,
        Step::Turn(a) => a.abs() * TURN_COST_PER_RAD * size,
    };
    let total: f64 = steps.iter().map(cost).sum();
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let mut budget = total * i as f64 / last;
        let mut pos = Vector3::zeros();
        let mut yaw = 0.0f64;
        for s in &steps {
            let c = cost(s);
            let frac = if c > 0.0 { (budget / c).clamp(0.0, 1.0) } else { 1.0 };
            match s {
                Step::Move(l) => pos += Vector3::new(yaw.sin(), 0.0, yaw.cos()) * (l * frac),
                Step::Turn(a) => yaw += a * frac,
            }
            budget -= c;
            if budget <= 0.0 {
                break;
            }
        }
        if i == n_frames - 1 && shape != Shape::Straight {
            pos = Vector3::zeros();
            yaw = 0.0;
        }
        poses.push(Pose::from_yaw(yaw, pos));
    }
    Ok(poses)
}

/// Landmarks fill the region between the trajectory's bounding box grown by
/// `inner_margin` and grown by `inner_margin + thickness` (in x and z), with
/// `|y| <= half_height`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_landmarks: usize,
    pub inner_margin: f64,
    pub thickness: f64,
    pub half_height: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_landmarks: 2000,
            inner_margin: 1.5,
            thickness: 3.0,
            half_height: 1.5,
        }
    }
}

/// A moving image-space box hiding landmarks from one camera, optionally
/// carrying its own coherent keypoints (a "pedestrian").
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub camera: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Top-left corner at `start_frame`, pixels.
    pub origin: [f64; 2],
    pub size: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub num_dynamic_keypoints: usize,
}

impl Occluder {
    pub fn active(&self, frame: usize) -> bool {
        frame >= self.start_frame && frame < self.end_frame
    }

    fn corner(&self, frame: usize) -> Vector2<f64> {
        let dt = frame.saturating_sub(self.start_frame) as f64;
        Vector2::new(self.origin[0] + self.velocity[0] * dt, self.origin[1] + self.velocity[1] * dt)
    }

    pub fn contains(&self, frame: usize, u: &Vector2<f64>) -> bool {
        if !self.active(frame) {
            return false;
        }
        let c = self.corner(frame);
        u.x >= c.x && u.y >= c.y && u.x < c.x + self.size[0] && u.y < c.y + self.size[1]
    }
}

/// Bursts of occlusion covering `coverage` of one camera's image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionSpec {
    pub camera: usize,
    pub coverage: f64,
    pub burst_frames: usize,
    /// Frames between burst starts.
    pub period: usize,
    pub first_frame: usize,
    pub num_dynamic_keypoints: usize,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            camera: 0,
            coverage: 0.8,
            burst_frames: 20,
            period: 100,
            first_frame: 40,
            num_dynamic_keypoints: 20,
        }
    }
}

impl OcclusionSpec {
    /// Full-height boxes of width `coverage * width`, drifting sideways.
    pub fn occluders(&self, n_frames: usize, width: u32, height: u32) -> Vec<Occluder> {
        let (w, h) = (width as f64, height as f64);
        let box_w = (self.coverage.clamp(0.0, 1.0) * w).round();
        let travel = w - box_w;
        let mut out = Vec::new();
        let mut start = self.first_frame;
        while start < n_frames && self.period > 0 {
            let v = if self.burst_frames > 1 { travel / (self.burst_frames - 1) as f64 } else { 0.0 };
            out.push(Occluder {
                camera: self.camera,
                start_frame: start,
                end_frame: (start + self.burst_frames).min(n_frames),
                origin: [0.0, 0.0],
                size: [box_w, h],
                velocity: [v, 0.0],
                num_dynamic_keypoints: self.num_dynamic_keypoints,
            });
            start += self.period;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub shape: Shape,
    pub size: f64,
    pub n_frames: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            shape: Shape::Square,
            size: 10.0,
            n_frames: 200,
        }
    }
}

/// Everything needed to build a [`SyntheticWorld`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub rig: RigSpec,
    pub trajectory: TrajectorySpec,
    pub scene: SceneSpec,
    pub noise_px: f64,
    pub bit_flips: usize,
    /// Extra random keypoints per camera, as a fraction of visible landmarks.
    pub outlier_rate: f64,
    pub occlusion: Option<OcclusionSpec>,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            trajectory: TrajectorySpec::default(),
            scene: SceneSpec::default(),
            noise_px: 0.5,
            bit_flips: 8,
            outlier_rate: 0.0,
            occlusion: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub landmarks: Vec<Vector3<f64>>,
    pub descriptors: Vec<Descriptor>,
    pub rig: RigCalibration,
    /// `(timestamp, world_T_body)`.
    pub trajectory: Vec<(f64, Pose<f64>)>,
    pub noise_px: f64,
    pub bit_flips: usize,
    pub outlier_rate: f64,
    pub occluders: Vec<Occluder>,
    pub seed: u64,
}

/// Uniform landmarks in the shell around the trajectory.
pub fn make_landmarks(scene: &SceneSpec, trajectory: &[Pose<f64>], rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in trajectory {
        let t = p.translation();
        lo = lo.inf(&Vector2::new(t.x, t.z));
        hi = hi.sup(&Vector2::new(t.x, t.z));
    }
    let (in_lo, in_hi) = (lo.add_scalar(-scene.inner_margin), hi.add_scalar(scene.inner_margin));
    let (out_lo, out_hi) = (in_lo.add_scalar(-scene.thickness), in_hi.add_scalar(scene.thickness));
    let mut out = Vec::with_capacity(scene.num_landmarks);
    while out.len() < scene.num_landmarks {
        let x = rng.random_range(out_lo.x..out_hi.x);
        let z = rng.random_range(out_lo.y..out_hi.y);
        if x > in_lo.x && x < in_hi.x && z > in_lo.y && z < in_hi.y {
            continue;
        }
        let y = rng.random_range(-scene.half_height..=scene.half_height);
        out.push(Vector3::new(x, y, z));
    }
    out
}

fn random_descriptor(rng: &mut impl Rng) -> Descriptor {
    Descriptor([rng.random(), rng.random(), rng.random(), rng.random()])
}

impl SyntheticWorld {
    pub fn from_spec(spec: &SimSpec) -> Result<Self, SimError> {
        if !(spec.noise_px >= 0.0) || !(0.0..=10.0).contains(&spec.outlier_rate) || spec.bit_flips > Descriptor::BITS {
            return Err(SimError::InvalidSpec("noise, outlier rate or bit flips out of range".into()));
        }
        let rig = make_rig(&spec.rig)?;
        let poses = make_trajectory(spec.trajectory.shape, spec.trajectory.size, spec.trajectory.n_frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let landmarks = make_landmarks(&spec.scene, &poses, &mut rng);
        let descriptors = (0..landmarks.len()).map(|_| random_descriptor(&mut rng)).collect();
        let occluders = spec
            .occlusion
            .map(|o| {
                if o.camera >= rig.num_cameras() {
                    return Err(SimError::InvalidSpec(format!("occluded camera {} does not exist", o.camera)));
                }
                Ok(o.occluders(poses.len(), spec.rig.width, spec.rig.height))
            })
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            landmarks,
            descriptors,
            rig,
            trajectory: poses
                .into_iter()
                .enumerate()
                .map(|(i, p)| (i as f64 * DEFAULT_FRAME_PERIOD, p))
                .collect(),
            noise_px: spec.noise_px,
            bit_flips: spec.bit_flips,
            outlier_rate: spec.outlier_rate,
            occluders,
            seed: spec.seed,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn ground_truth(&self) -> Trajectory<f64> {
        Trajectory::new(self.trajectory.clone()).expect("increasing timestamps")
    }
}

/// Rendered keypoints plus the landmark behind each one (`None` for outliers
/// and dynamic content).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub input: FrameInput,
    pub labels: Vec<Vec<Option<usize>>>,
}

/// Forward model for one frame. Deterministic in `(world.seed, index)`.
///
/// # Panics
/// If `index` is out of range.
pub fn render_frame(world: &SyntheticWorld, index: usize) -> RenderedFrame {
    let (timestamp, w_t_b) = world.trajectory[index];
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ 0x5EED_F4A3_u64);
    rng.set_stream(index as u64 + 1);
    let noise = Normal::new(0.0, world.noise_px.max(0.0)).expect("finite sigma");
    let mut cameras = Vec::with_capacity(world.rig.num_cameras());
    let mut labels = Vec::with_capacity(world.rig.num_cameras());
    for (c, cam) in world.rig.cameras().iter().enumerate() {
        let w_t_c = w_t_b.compose(&cam.body_t_cam);
        let k = &cam.intrinsics;
        let occluders: Vec<&Occluder> = world
            .occluders
            .iter()
            .filter(|o| o.camera == c && o.active(index))
            .collect();
        let mut kps = Vec::new();
        let mut lab = Vec::new();
        for (id, p) in world.landmarks.iter().enumerate() {
            let pc = w_t_c.inverse_transform_point(p);
            let Ok(u) = k.project(&pc) else { continue };
            if !k.contains(&u) || occluders.iter().any(|o| o.contains(index, &u)) {
                continue;
            }
            let u = if world.noise_px > 0.0 {
                u + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                u
            };
            if !k.contains(&u) {
                continue;
            }
            let mut d = world.descriptors[id];
            if world.bit_flips > 0 {
                for b in sample(&mut rng, Descriptor::BITS, world.bit_flips).iter() {
                    d.flip_bit(b);
                }
            }
            kps.push(RawKeypoint {
                id: id as u64,
                pixel: u,
                octave: 0,
                descriptor: d,
            });
            lab.push(Some(id));
        }
        let mut next_id = OUTLIER_ID_BASE;
        let n_out = (world.outlier_rate * kps.len() as f64).round() as usize;
        for _ in 0..n_out {
            let u = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
            kps.push(RawKeypoint {
                id: next_id,
                pixel: u,
                octave: 0,
                descriptor: random_descriptor(&mut rng),
            });
            lab.push(None);
            next_id += 1;
        }
        for (oi, o) in occluders.iter().enumerate() {
            // Dynamic keypoints keep their descriptor and their place on the box.
            let mut orng = ChaCha8Rng::seed_from_u64(world.seed ^ 0x0CC1_0DE5);
            orng.set_stream((c as u64) << 32 | (oi as u64) << 16 | o.start_frame as u64);
            let corner = o.corner(index);
            for _ in 0..o.num_dynamic_keypoints {
                let rel = Vector2::new(orng.random_range(0.0..o.size[0]), orng.random_range(0.0..o.size[1]));
                let d = random_descriptor(&mut orng);
                let u = corner + rel;
                if k.contains(&u) {
                    kps.push(RawKeypoint {
                        id: next_id,
                        pixel: u,
                        octave: 0,
                        descriptor: d,
                    });
                    lab.push(None);
                }
                next_id += 1;
            }
        }
        cameras.push(kps);
        labels.push(lab);
    }
    RenderedFrame {
        input: FrameInput {
            frame_id: index as u64,
            timestamp,
            cameras,
        },
        labels,
    }
}

/// Renders a world frame by frame.
#[derive(Clone, Debug)]
pub struct SimFrameSource<'a> {
    world: &'a SyntheticWorld,
    next: usize,
}

impl<'a> SimFrameSource<'a> {
    pub fn new(world: &'a SyntheticWorld) -> Self {
        Self { world, next: 0 }
    }
}

impl FrameSource for SimFrameSource<'_> {
    fn num_cameras(&self) -> usize {
        self.world.rig.num_cameras()
    }

    fn next_frame(&mut self) -> Option<FrameInput> {
        if self.next >= self.world.num_frames() {
            return None;
        }
        self.next += 1;
        Some(render_frame(self.world, self.next - 1).input)
    }
}

/// Writes `rig.json`, `tracks.csv`, `frames.csv` and `groundtruth.txt`.
pub fn export_dataset(world: &SyntheticWorld, dir: impl AsRef<Path>) -> Result<(), SimError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SimError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    save_rig(&world.rig, dir.join(RIG_FILE))?;
    let frames: Vec<FrameInput> = (0..world.num_frames()).map(|i| render_frame(world, i).input).collect();
    let create = |name: &str| {
        let path = dir.join(name);
        fs::File::create(&path).map(BufWriter::new).map_err(io(&path))
    };
    write_tracks(create(TRACKS_FILE)?, &frames).map_err(io(&dir.join(TRACKS_FILE)))?;
    write_frame_times(create(FRAMES_FILE)?, &frames).map_err(io(&dir.join(FRAMES_FILE)))?;
    write_tum(create(GROUNDTRUTH_FILE)?, &world.ground_truth()).map_err(io(&dir.join(GROUNDTRUTH_FILE)))?;
    Ok(())
}
