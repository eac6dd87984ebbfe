use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};

use super::{Estimator, SolverError};
use crate::geometry::{nearest_rotation, skew, Intrinsics, Pose};
use crate::scalar::{lit, to_f64, Real};

/// Default minimum median rotation-compensated parallax for a monocular
/// relative pose.
pub const DEFAULT_MIN_PARALLAX_DEG: f64 = 0.5;

/// The same point observed at pixel `a` in frame a and `b` in frame b.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCorrespondence<T: Real> {
    pub a: Vector2<T>,
    pub b: Vector2<T>,
}

/// Relative pose `b_T_a` of a single pinhole from at least 8 pixel
/// correspondences. The translation has unit norm.
///
/// Uses [`DEFAULT_MIN_PARALLAX_DEG`]; see [`solve_rel_pose_mono_with`].
pub fn solve_rel_pose_mono<T: Real>(
    corrs: &[PixelCorrespondence<T>],
    k: &Intrinsics<T>,
) -> Result<Pose<T>, SolverError> {
    solve_rel_pose_mono_with(corrs, k, lit::<T>(DEFAULT_MIN_PARALLAX_DEG.to_radians()))
}

/// Normalized 8-point estimate, essential decomposition and cheirality
/// selection. Fails with [`SolverError::LowParallax`] when the median
/// rotation-compensated angle between matched rays is below `min_parallax`
/// (radians), i.e. the motion is (close to) a pure rotation.
pub fn solve_rel_pose_mono_with<T: Real>(
    corrs: &[PixelCorrespondence<T>],
    k: &Intrinsics<T>,
    min_parallax: T,
) -> Result<Pose<T>, SolverError> {
    if corrs.len() < 8 {
        return Err(SolverError::InsufficientData {
            needed: 8,
            got: corrs.len(),
        });
    }
    let (xa, xb) = normalized(corrs, k)?;
    // A pure rotation explains the data: translation direction is unobservable.
    let rot_only = rotation_only(&xa, &xb);
    let p = median_parallax(&rot_only, &xa, &xb);
    if p < min_parallax {
        return Err(SolverError::LowParallax {
            parallax_deg: to_f64(p).to_degrees(),
        });
    }
    let pose = eight_point(&xa, &xb)?;
    let p = median_parallax(&pose.rotation_matrix(), &xa, &xb);
    if p < min_parallax {
        return Err(SolverError::LowParallax {
            parallax_deg: to_f64(p).to_degrees(),
        });
    }
    Ok(pose)
}

type Rays<T> = Vec<Vector3<T>>;

fn normalized<T: Real>(
    corrs: &[PixelCorrespondence<T>],
    k: &Intrinsics<T>,
) -> Result<(Rays<T>, Rays<T>), SolverError> {
    let mut xa = Vec::with_capacity(corrs.len());
    let mut xb = Vec::with_capacity(corrs.len());
    for c in corrs {
        let a = k.unproject(&c.a).map_err(|e| SolverError::Numerical(e.to_string()))?;
        let b = k.unproject(&c.b).map_err(|e| SolverError::Numerical(e.to_string()))?;
        xa.push(a);
        xb.push(b);
    }
    Ok((xa, xb))
}

/// Rotation best mapping the unit rays of frame a onto those of frame b.
fn rotation_only<T: Real>(xa: &[Vector3<T>], xb: &[Vector3<T>]) -> Matrix3<T> {
    let mut h = Matrix3::zeros();
    for (a, b) in xa.iter().zip(xb) {
        h += b.normalize() * a.normalize().transpose();
    }
    nearest_rotation(&h)
}

fn median_parallax<T: Real>(r: &Matrix3<T>, xa: &[Vector3<T>], xb: &[Vector3<T>]) -> T {
    let mut angles: Vec<f64> = xa
        .iter()
        .zip(xb)
        .map(|(a, b)| {
            let ra = r * a;
            to_f64(ra.cross(b).norm().atan2(ra.dot(b)))
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    lit(angles[angles.len() / 2])
}

/// Similarity normalizing 2D points to zero mean and mean distance sqrt(2).
fn hartley<T: Real>(x: &[Vector3<T>]) -> Matrix3<T> {
    let n: T = lit(x.len() as f64);
    let mean = x.iter().fold(Vector2::zeros(), |acc, p| acc + p.xy()) / n;
    let dist = x.iter().map(|p| (p.xy() - mean).norm()).fold(T::zero(), |a, b| a + b) / n;
    let s = if dist > T::zero() { lit::<T>(2f64.sqrt()) / dist } else { T::one() };
    Matrix3::new(s, T::zero(), -s * mean.x, T::zero(), s, -s * mean.y, T::zero(), T::zero(), T::one())
}

fn eight_point<T: Real>(xa: &[Vector3<T>], xb: &[Vector3<T>]) -> Result<Pose<T>, SolverError> {
    let (ta, tb) = (hartley(xa), hartley(xb));
    let rows = xa.len().max(9);
    let mut a = DMatrix::<T>::zeros(rows, 9);
    for (r, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let (na, nb) = (ta * pa, tb * pb);
        for i in 0..3 {
            for j in 0..3 {
                a[(r, 3 * i + j)] = nb[i] * na[j];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| SolverError::Numerical("svd failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, T::max_value().unwrap()), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let en = Matrix3::from_fn(|i, j| v_t[(imin, 3 * i + j)]);
    let e = tb.transpose() * en * ta;

    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut vt)) = (svd.u, svd.v_t) else {
        return Err(SolverError::Numerical("svd failed".into()));
    };
    if u.determinant() < T::zero() {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < T::zero() {
        vt.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(
        T::zero(),
        -T::one(),
        T::zero(),
        T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::one(),
    );
    let t: Vector3<T> = u.column(2).into_owned();
    let mut best: Option<(Pose<T>, usize)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for sign in [T::one(), -T::one()] {
            let cand = Pose::from_matrix(&r, t * sign);
            let votes = cheirality_votes(&cand, xa, xb);
            if best.as_ref().map_or(true, |b| votes > b.1) {
                best = Some((cand, votes));
            }
        }
    }
    let (pose, votes) = best.expect("four candidates");
    if votes == 0 {
        return Err(SolverError::Cheirality);
    }
    Ok(pose)
}

/// Depths `(la, lb)` with `lb x_b = R la x_a + t` in least squares.
fn depths<T: Real>(pose: &Pose<T>, a: &Vector3<T>, b: &Vector3<T>) -> Option<(T, T)> {
    let ra = pose.rotation_matrix() * a;
    let t = pose.translation();
    let m = Matrix2::new(ra.dot(&ra), -ra.dot(b), -ra.dot(b), b.dot(b));
    let rhs = Vector2::new(-ra.dot(t), b.dot(t));
    m.try_inverse().map(|inv| {
        let d = inv * rhs;
        (d.x, d.y)
    })
}

fn cheirality_votes<T: Real>(pose: &Pose<T>, xa: &[Vector3<T>], xb: &[Vector3<T>]) -> usize {
    xa.iter()
        .zip(xb)
        .filter(|(a, b)| matches!(depths(pose, a, b), Some((da, db)) if da > T::zero() && db > T::zero()))
        .count()
}

/// Essential matrix `[t]_x R` of a relative pose.
pub fn essential_matrix<T: Real>(b_t_a: &Pose<T>) -> Matrix3<T> {
    skew(b_t_a.translation()) * b_t_a.rotation_matrix()
}

/// RANSAC adapter for the monocular solver. Residuals are Sampson distances
/// in pixels; the parallax test is left to the caller.
#[derive(Clone, Copy, Debug)]
pub struct MonoRelativePoseEstimator<T: Real> {
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> Estimator<PixelCorrespondence<T>> for MonoRelativePoseEstimator<T> {
    type Model = Pose<T>;

    fn sample_size(&self) -> usize {
        8
    }

    fn fit(&self, sample: &[&PixelCorrespondence<T>]) -> Option<Pose<T>> {
        let owned: Vec<_> = sample.iter().map(|c| **c).collect();
        let (xa, xb) = normalized(&owned, &self.intrinsics).ok()?;
        eight_point(&xa, &xb).ok()
    }

    fn residual(&self, model: &Pose<T>, c: &PixelCorrespondence<T>) -> f64 {
        let Ok(kinv) = self.intrinsics.inverse_matrix() else {
            return f64::INFINITY;
        };
        let f = kinv.transpose() * essential_matrix(model) * kinv;
        let xa = Vector3::new(c.a.x, c.a.y, T::one());
        let xb = Vector3::new(c.b.x, c.b.y, T::one());
        let fa = f * xa;
        let fb = f.transpose() * xb;
        let num = xb.dot(&fa);
        let den = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
        if den <= T::zero() {
            return f64::INFINITY;
        }
        to_f64((num * num / den).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{ransac, RansacConfig};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Intrinsics<f64> {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, pose: &Pose<f64>, n: usize) -> Vec<PixelCorrespondence<f64>> {
        let k = camera();
        let mut out = Vec::new();
        while out.len() < n {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..10.0),
            );
            let (Ok(a), Ok(b)) = (k.project(&p), k.project(&pose.transform_point(&p))) else {
                continue;
            };
            if k.contains(&a) && k.contains(&b) {
                out.push(PixelCorrespondence { a, b });
            }
        }
        out
    }

    fn truth() -> Pose<f64> {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.02, -0.08, 0.01),
            Vector3::new(0.5, 0.05, 0.1),
        )
    }

    fn direction_error(est: &Pose<f64>, truth: &Pose<f64>) -> f64 {
        let (a, b) = (est.translation(), truth.translation().normalize());
        a.cross(&b).norm().atan2(a.dot(&b))
    }

    #[test]
    fn recovers_rotation_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = truth();
        let corrs = scene(&mut rng, &truth, 40);
        let est = solve_rel_pose_mono(&corrs, &camera()).unwrap();
        assert!(est.angle_to(&truth) < 1e-6);
        assert!(direction_error(&est, &truth) < 1e-6);
        assert!((est.translation().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_motion_has_no_parallax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let corrs = scene(&mut rng, &Pose::identity(), 30);
        assert!(matches!(
            solve_rel_pose_mono(&corrs, &camera()),
            Err(SolverError::LowParallax { .. })
        ));
    }

    #[test]
    fn ransac_rejects_half_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = truth();
        let mut corrs = scene(&mut rng, &truth, 100);
        let mut expected = vec![true; 100];
        for (i, c) in corrs.iter_mut().enumerate().filter(|(i, _)| i % 2 == 0) {
            c.b = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            expected[i] = false;
        }
        // Planted outliers that happen to satisfy the epipolar constraint are inliers.
        let est = MonoRelativePoseEstimator { intrinsics: camera() };
        for (i, c) in corrs.iter().enumerate() {
            if !expected[i] && est.residual(&truth, c) <= 1.0 {
                expected[i] = true;
            }
        }
        let cfg = RansacConfig {
            max_iterations: 2000,
            inlier_threshold: 1.0,
            ..Default::default()
        };
        let r = ransac(&est, &corrs, &cfg).unwrap();
        assert_eq!(r.inliers, expected);
        assert!(r.model.angle_to(&truth) < 0.5f64.to_radians());
        assert!(direction_error(&r.model, &truth) < 0.5f64.to_radians());
    }

    #[test]
    fn needs_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let corrs = scene(&mut rng, &truth(), 7);
        assert_eq!(
            solve_rel_pose_mono(&corrs, &camera()),
            Err(SolverError::InsufficientData { needed: 8, got: 7 })
        );
    }
}
