//! Trajectory association, Umeyama alignment, absolute trajectory error and
//! loop drift.
//!
//! The reported scale is the factor that multiplies the estimated trajectory
//! to best fit the ground truth: an estimate twice too large has scale 0.5.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::scalar::{lit, to_f64, Real};

/// Largest timestamp difference for two poses to be associated.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("timestamps must be strictly increasing (index {0})")]
    NonIncreasing(usize),
    #[error("only {0} associated poses, need at least 3")]
    InsufficientOverlap(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    Se3,
    Sim3,
}

impl std::str::FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "se3" => Ok(AlignMode::Se3),
            "sim3" => Ok(AlignMode::Sim3),
            other => Err(format!("unknown alignment mode '{other}' (expected se3 or sim3)")),
        }
    }
}

/// Timestamped poses (`world_T_body`) with strictly increasing stamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    stamps: Vec<f64>,
    poses: Vec<Pose<T>>,
}

impl<T: Real> Default for Trajectory<T> {
    fn default() -> Self {
        Self {
            stamps: Vec::new(),
            poses: Vec::new(),
        }
    }
}

impl<T: Real> Trajectory<T> {
    pub fn new(entries: Vec<(f64, Pose<T>)>) -> Result<Self, EvalError> {
        let mut t = Self::default();
        for (s, p) in entries {
            t.push(s, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, stamp: f64, pose: Pose<T>) -> Result<(), EvalError> {
        if self.stamps.last().is_some_and(|&l| !(stamp > l)) {
            return Err(EvalError::NonIncreasing(self.stamps.len()));
        }
        self.stamps.push(stamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Pose<T>] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Pose<T>)> {
        self.stamps.iter().copied().zip(&self.poses)
    }

    /// Sum of distances between consecutive positions.
    pub fn path_length(&self) -> T {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation() - w[0].translation()).norm())
            .fold(T::zero(), |a, b| a + b)
    }

    /// Applies `x -> s R x + t` to every pose.
    pub fn transformed(&self, rotation: &Matrix3<T>, translation: &Vector3<T>, scale: T) -> Self {
        let q = UnitQuaternion::from_matrix(rotation);
        Self {
            stamps: self.stamps.clone(),
            poses: self
                .poses
                .iter()
                .map(|p| Pose::new(q * p.rotation(), rotation * p.translation() * scale + translation))
                .collect(),
        }
    }
}

/// Pairs `(est index, gt index)` by nearest timestamp within the window.
/// Each ground-truth pose is used at most once.
pub fn associate<T: Real>(est: &Trajectory<T>, gt: &Trajectory<T>, window: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut last_gt: Option<usize> = None;
    for (i, &s) in est.stamps.iter().enumerate() {
        let k = gt.stamps.partition_point(|&g| g < s);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len())
            .min_by(|&a, &b| {
                (gt.stamps[a] - s)
                    .abs()
                    .partial_cmp(&(gt.stamps[b] - s).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        if let Some(j) = best {
            if (gt.stamps[j] - s).abs() <= window && last_gt.is_none_or(|l| j > l) {
                out.push((i, j));
                last_gt = Some(j);
            }
        }
    }
    out
}

/// Similarity mapping estimated positions onto ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub scale: T,
    pub pairs: Vec<(usize, usize)>,
    /// Estimated poses without a ground-truth partner.
    pub dropped: usize,
}

impl<T: Real> Alignment<T> {
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares alignment of associated positions (Umeyama).
pub fn align<T: Real>(est: &Trajectory<T>, gt: &Trajectory<T>, mode: AlignMode) -> Result<Alignment<T>, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(EvalError::InsufficientOverlap(pairs.len()));
    }
    let x: Vec<Vector3<T>> = pairs.iter().map(|&(i, _)| *est.poses[i].translation()).collect();
    let y: Vec<Vector3<T>> = pairs.iter().map(|&(_, j)| *gt.poses[j].translation()).collect();
    let (rotation, translation, scale) = umeyama(&x, &y, mode == AlignMode::Sim3);
    Ok(Alignment {
        rotation,
        translation,
        scale,
        dropped: est.len() - pairs.len(),
        pairs,
    })
}

/// `(R, t, s)` minimizing `sum |y - (s R x + t)|^2`.
pub fn umeyama<T: Real>(x: &[Vector3<T>], y: &[Vector3<T>], with_scale: bool) -> (Matrix3<T>, Vector3<T>, T) {
    let n: T = lit(x.len() as f64);
    let mx = x.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let my = y.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::<T>::zeros();
    let mut var_x = T::zero();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
        var_x += (a - mx).norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut s = Matrix3::<T>::identity();
    if (u * v_t).determinant() < T::zero() {
        s[(2, 2)] = -T::one();
    }
    let r = u * s * v_t;
    let scale = if with_scale && var_x > T::zero() {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x
    } else {
        T::one()
    };
    let t = my - r * mx * scale;
    (r, t, scale)
}

/// Absolute trajectory error after alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AteReport<T: Real> {
    pub rmse: T,
    pub mean: T,
    /// `100 * mean / ground-truth path length`.
    pub percent: T,
    pub scale: T,
    pub pairs: usize,
    pub dropped: usize,
}

pub fn ate<T: Real>(est: &Trajectory<T>, gt: &Trajectory<T>, mode: AlignMode) -> Result<AteReport<T>, EvalError> {
    let a = align(est, gt, mode)?;
    let n: T = lit(a.pairs.len() as f64);
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for &(i, j) in &a.pairs {
        let e = (a.apply(est.poses[i].translation()) - gt.poses[j].translation()).norm();
        sum += e;
        sum_sq += e * e;
    }
    let mean = sum / n;
    let length = gt.path_length();
    Ok(AteReport {
        rmse: (sum_sq / n).sqrt(),
        mean,
        percent: if length > T::zero() { mean / length * lit(100.0) } else { T::zero() },
        scale: a.scale,
        pairs: a.pairs.len(),
        dropped: a.dropped,
    })
}

/// Distance between the first and last positions of a closed run.
pub fn loop_drift<T: Real>(est: &Trajectory<T>) -> T {
    match (est.poses.first(), est.poses.last()) {
        (Some(a), Some(b)) => (b.translation() - a.translation()).norm(),
        _ => T::zero(),
    }
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines.
pub fn write_tum<T: Real, W: Write>(mut w: W, traj: &Trajectory<T>) -> std::io::Result<()> {
    for (s, p) in traj.iter() {
        let t = p.translation();
        let q = p.rotation().quaternion();
        writeln!(
            w,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            s,
            to_f64(t.x),
            to_f64(t.y),
            to_f64(t.z),
            to_f64(q.i),
            to_f64(q.j),
            to_f64(q.k),
            to_f64(q.w)
        )?;
    }
    Ok(())
}

/// Reads a TUM trajectory; `#` comments and blank lines are skipped.
pub fn read_tum<R: BufRead>(r: R) -> Result<Trajectory<f64>, EvalError> {
    let mut traj = Trajectory::default();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| EvalError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        if v.len() != 8 {
            return Err(EvalError::Parse {
                line: n + 1,
                message: format!("expected 8 values, got {}", v.len()),
            });
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6]));
        traj.push(v[0], Pose::new(q, Vector3::new(v[1], v[2], v[3])))?;
    }
    Ok(traj)
}
