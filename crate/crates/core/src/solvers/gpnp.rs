use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use super::lm::{apply_left, lm_pose};
use super::{Estimator, SolverError};
use crate::geometry::{ray_point_residual, skew, PluckerRay, Pose};
use crate::scalar::{lit, to_f64, Real};

/// A known world point and the body-frame ray it was observed along.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPointMatch<T: Real> {
    pub point_world: Vector3<T>,
    pub ray: PluckerRay<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpnpOptions {
    pub max_iterations: usize,
    /// Converged when an accepted step changes the cost by less than this, relative.
    pub relative_tolerance: f64,
    /// Largest acceptable RMS angular error (radians) after convergence.
    pub max_rms_angle: f64,
}

impl Default for GpnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-10,
            max_rms_angle: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpnpSolution<T: Real> {
    /// `body_T_world`.
    pub pose: Pose<T>,
    /// Sum of squared ray-to-point distances.
    pub cost: T,
    pub iterations: usize,
    /// Cost at the start and after each accepted step.
    pub cost_history: Vec<T>,
    pub rms_angle: T,
}

/// Absolute pose `body_T_world` of a generalized camera.
///
/// Minimizes the summed squared distance between each observed ray and its
/// world point mapped into the body frame, by Levenberg-Marquardt from
/// `initial_guess`. Fails with [`SolverError::PoseUnreliable`] when the RMS
/// angular error of the result exceeds `options.max_rms_angle`.
pub fn solve_gpnp<T: Real>(
    matches: &[RayPointMatch<T>],
    initial_guess: &Pose<T>,
    options: &GpnpOptions,
) -> Result<GpnpSolution<T>, SolverError> {
    if matches.len() < 4 {
        return Err(SolverError::InsufficientData {
            needed: 4,
            got: matches.len(),
        });
    }
    if !initial_guess.translation().iter().all(|v| v.is_finite()) {
        return Err(SolverError::Numerical("non-finite initial guess".into()));
    }
    let out = refine(matches, initial_guess, options.max_iterations, lit(options.relative_tolerance));
    let rms = rms_angle(&out.pose, matches);
    if !(to_f64(rms) <= options.max_rms_angle) {
        return Err(SolverError::PoseUnreliable { rms: to_f64(rms) });
    }
    Ok(GpnpSolution {
        pose: out.pose,
        cost: out.cost,
        iterations: out.iterations,
        cost_history: out.history,
        rms_angle: rms,
    })
}

fn refine<T: Real>(
    matches: &[RayPointMatch<T>],
    init: &Pose<T>,
    max_iter: usize,
    rel_tol: T,
) -> super::lm::LmOutcome<T> {
    let normal = |pose: &Pose<T>| {
        let r = pose.rotation_matrix();
        let mut h = Matrix6::<T>::zeros();
        let mut g = Vector6::<T>::zeros();
        let mut cost = T::zero();
        for m in matches {
            let rp = r * m.point_world;
            let p = rp + pose.translation();
            let e = ray_point_residual(&m.ray, &p);
            let q = m.ray.direction;
            let de_dp = q * q.transpose() - Matrix3::identity();
            let mut dp = Matrix3x6::<T>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rp)));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = de_dp * dp;
            h += j.transpose() * j;
            g += j.transpose() * e;
            cost += e.norm_squared();
        }
        (cost, h, g)
    };
    let cost = |pose: &Pose<T>| {
        matches
            .iter()
            .map(|m| ray_point_residual(&m.ray, &pose.transform_point(&m.point_world)).norm_squared())
            .fold(T::zero(), |a, b| a + b)
    };
    lm_pose(*init, max_iter, rel_tol, apply_left, normal, cost)
}

/// Angle between a ray and the direction from its foot point to `p`.
/// Points behind the foot point get an angle above 90 degrees.
fn angular_error<T: Real>(ray: &PluckerRay<T>, p: &Vector3<T>) -> T {
    let v = p - ray.closest_point_to_origin();
    v.cross(&ray.direction).norm().atan2(v.dot(&ray.direction))
}

fn rms_angle<T: Real>(pose: &Pose<T>, matches: &[RayPointMatch<T>]) -> T {
    let s = matches
        .iter()
        .map(|m| {
            let a = angular_error(&m.ray, &pose.transform_point(&m.point_world));
            a * a
        })
        .fold(T::zero(), |a, b| a + b);
    (s / lit(matches.len() as f64)).sqrt()
}

/// RANSAC adapter for [`solve_gpnp`]: minimal samples of 4 refined from
/// `initial_guess` with a loose iteration budget. Residuals are angular
/// errors in pixels via `focal_px`.
#[derive(Clone, Copy, Debug)]
pub struct GpnpEstimator<T: Real> {
    pub initial_guess: Pose<T>,
    pub focal_px: f64,
    pub sample_iterations: usize,
}

impl<T: Real> GpnpEstimator<T> {
    pub fn new(initial_guess: Pose<T>, focal_px: f64) -> Self {
        Self {
            initial_guess,
            focal_px,
            sample_iterations: 10,
        }
    }
}

impl<T: Real> Estimator<RayPointMatch<T>> for GpnpEstimator<T> {
    type Model = Pose<T>;

    fn sample_size(&self) -> usize {
        4
    }

    fn fit(&self, sample: &[&RayPointMatch<T>]) -> Option<Pose<T>> {
        let owned: Vec<_> = sample.iter().map(|m| **m).collect();
        let out = refine(&owned, &self.initial_guess, self.sample_iterations, lit(1e-6));
        out.pose.translation().iter().all(|v| v.is_finite()).then_some(out.pose)
    }

    fn refit(&self, inliers: &[&RayPointMatch<T>], previous: &Pose<T>) -> Option<Pose<T>> {
        let owned: Vec<_> = inliers.iter().map(|m| **m).collect();
        Some(refine(&owned, previous, 50, lit(1e-10)).pose)
    }

    fn residual(&self, model: &Pose<T>, m: &RayPointMatch<T>) -> f64 {
        to_f64(angular_error(&m.ray, &model.transform_point(&m.point_world))) * self.focal_px
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{ransac, RansacConfig};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig_centers() -> [Vector3<f64>; 3] {
        [
            Vector3::zeros(),
            Vector3::new(0.165, 0.0, 0.0),
            Vector3::new(-0.1, 0.05, -0.1),
        ]
    }

    fn matches(rng: &mut ChaCha8Rng, b_t_w: &Pose<f64>, n: usize) -> Vec<RayPointMatch<f64>> {
        let centers = rig_centers();
        (0..n)
            .map(|i| {
                let pw = Vector3::new(
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(2.0..5.0),
                );
                let pb = b_t_w.transform_point(&pw);
                let c = centers[i % centers.len()];
                RayPointMatch {
                    point_world: pw,
                    ray: PluckerRay::from_point_direction(&c, &(pb - c)),
                }
            })
            .collect()
    }

    fn displaced() -> Pose<f64> {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.03, 0.1, -0.02),
            Vector3::new(0.15, -0.05, 0.2),
        )
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = matches(&mut rng, &Pose::identity(), 20);
        let s = solve_gpnp(&m, &Pose::identity(), &GpnpOptions::default()).unwrap();
        assert!(s.pose.angle_to(&Pose::identity()) < 1e-12);
        assert!(s.pose.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_displaced_pose_from_previous() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = displaced();
        let m = matches(&mut rng, &truth, 30);
        let s = solve_gpnp(&m, &Pose::identity(), &GpnpOptions::default()).unwrap();
        assert!(s.pose.angle_to(&truth) < 1e-8);
        assert!((s.pose.translation() - truth.translation()).norm() < 1e-8);
    }

    #[test]
    fn wrong_points_are_unreliable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = matches(&mut rng, &displaced(), 12);
        for x in m.iter_mut() {
            x.point_world = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.0..6.0),
            );
        }
        assert!(matches!(
            solve_gpnp(&m, &Pose::identity(), &GpnpOptions::default()),
            Err(SolverError::PoseUnreliable { .. })
        ));
    }

    #[test]
    fn ransac_with_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = displaced();
        let mut m = matches(&mut rng, &truth, 100);
        let mut expected = vec![true; m.len()];
        for i in (0..m.len()).filter(|i| i % 10 < 3) {
            m[i].point_world += Vector3::new(
                rng.random_range(0.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            expected[i] = false;
        }
        let sigma = 1.0;
        let est = GpnpEstimator::new(Pose::identity(), 500.0);
        let cfg = RansacConfig {
            inlier_threshold: (5.99f64).sqrt() * sigma,
            ..Default::default()
        };
        let r = ransac(&est, &m, &cfg).unwrap();
        assert_eq!(r.inliers, expected);
        assert!(r.model.angle_to(&truth) < 0.5f64.to_radians());
        assert!((r.model.translation() - truth.translation()).norm() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn accepted_steps_never_increase_cost(seed in 0u64..1000, noise in 0.0f64..0.02) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = displaced();
            let mut m = matches(&mut rng, &truth, 15);
            for x in m.iter_mut() {
                x.point_world += Vector3::new(
                    rng.random_range(-noise..=noise),
                    rng.random_range(-noise..=noise),
                    rng.random_range(-noise..=noise),
                );
            }
            let out = refine(&m, &Pose::identity(), 50, 1e-10);
            for w in out.history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
