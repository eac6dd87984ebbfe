mod common;

use std::collections::BTreeSet;

use common::{backend_fixture, uniform_vec};
use mcslam::backend::{marginal_window, optimize, reprojection_jacobians, reprojection_residual, OptimizeOptions};
use mcslam::eval::{ate, AlignMode, Trajectory};
use mcslam::{Intrinsics, Pose};
use nalgebra::{DMatrix, Matrix2xX, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng, angle: f64, trans: f64) -> Pose<f64> {
    let w = uniform_vec(rng, angle);
    Pose::identity()
        .retract(&Vector6::new(w.x, w.y, w.z, 0.0, 0.0, 0.0))
        .compose(&Pose::from_translation(uniform_vec(rng, trans)))
}

/// Central differences of the residual under the same perturbations the
/// optimizer uses.
fn numeric_jacobians(
    pose: &Pose<f64>,
    ext: &Pose<f64>,
    lm: &Vector3<f64>,
    k: &Intrinsics<f64>,
    z: &Vector2<f64>,
    sigma: f64,
) -> (Matrix2xX<f64>, Matrix2xX<f64>, Matrix2xX<f64>) {
    let h = 1e-6;
    let f = |p: &Pose<f64>, e: &Pose<f64>, l: &Vector3<f64>| reprojection_residual(p, e, l, k, z, sigma);
    let mut jp = Matrix2xX::zeros(6);
    let mut je = Matrix2xX::zeros(6);
    let mut jl = Matrix2xX::zeros(3);
    for i in 0..6 {
        let mut d = Vector6::zeros();
        d[i] = h;
        let col = (f(&pose.retract(&d), ext, lm) - f(&pose.retract(&-d), ext, lm)) / (2.0 * h);
        jp.set_column(i, &col);
        let col = (f(pose, &ext.retract(&d), lm) - f(pose, &ext.retract(&-d), lm)) / (2.0 * h);
        je.set_column(i, &col);
    }
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = h;
        let col = (f(pose, ext, &(lm + d)) - f(pose, ext, &(lm - d))) / (2.0 * h);
        jl.set_column(i, &col);
    }
    (jp, jl, je)
}

fn rel_err(a: &Matrix2xX<f64>, b: &Matrix2xX<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-8)
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 3.0, 2.0);
        let ext = random_pose(&mut rng, 0.5, 0.3);
        let f = rng.random_range(300.0..800.0);
        let k = Intrinsics::new(f, f * rng.random_range(0.9..1.1), 320.0, 240.0, 640, 480).unwrap();
        let pc = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..5.0));
        let lm = pose.transform_point(&ext.transform_point(&pc));
        let z = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let sigma = rng.random_range(0.5..2.0);
        let (_, jp, jl, je) = reprojection_jacobians(&pose, &ext, &lm, &k, &z, sigma);
        let (np, nl, ne) = numeric_jacobians(&pose, &ext, &lm, &k, &z, sigma);
        let to_dyn = |m: &[f64], _c: usize| Matrix2xX::from_column_slice(m);
        assert!(rel_err(&to_dyn(jp.as_slice(), 6), &np) < 1e-4);
        assert!(rel_err(&to_dyn(jl.as_slice(), 3), &nl) < 1e-4);
        assert!(rel_err(&to_dyn(je.as_slice(), 6), &ne) < 1e-4);
    }
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let fx = backend_fixture(1, 0.0, 10, 200);
    let mut g = fx.truth.clone();
    for f in &g.factors {
        assert!(g.residual(f).norm() < 1e-9);
    }
    let report = optimize(&mut g, &OptimizeOptions::default()).unwrap();
    assert!(report.final_cost < 1e-12);
    assert_eq!(g, fx.truth);
}

#[test]
fn cost_is_sum_of_robustified_residuals() {
    let fx = backend_fixture(2, 0.5, 6, 80);
    let opts = OptimizeOptions::default();
    let g = &fx.perturbed;
    let mut expected = 0.0;
    for f in &g.factors {
        let s = g.residual(f).norm_squared();
        let d = opts.huber_delta / f.sigma;
        expected += if s.sqrt() <= d { s } else { 2.0 * d * s.sqrt() - d * d };
    }
    let (k, p) = g.prior.unwrap();
    expected += p.residual(&g.poses[&k].pose).norm_squared();
    assert!((g.cost(&opts) - expected).abs() <= 1e-9 * expected);
}

fn trajectory(g: &mcslam::backend::FactorGraph) -> Trajectory<f64> {
    Trajectory::new(g.poses.iter().map(|(k, v)| (*k as f64, v.pose)).collect()).unwrap()
}

#[test]
fn perturbed_graph_converges() {
    for seed in 0..10 {
        let fx = backend_fixture(100 + seed, 0.5, 10, 200);
        let mut g = fx.perturbed.clone();
        let report = optimize(&mut g, &OptimizeOptions::default()).unwrap();
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let rms = g.rms_reprojection_px();
        let err = ate(&trajectory(&g), &trajectory(&fx.truth), AlignMode::Se3).unwrap();
        assert!(rms <= 0.6, "seed {seed}: rms {rms}");
        assert!(err.rmse <= 0.005, "seed {seed}: ate {}", err.rmse);
    }
}

#[test]
fn normal_equations_are_full_rank_at_solution() {
    let fx = backend_fixture(3, 0.5, 4, 40);
    let mut g = fx.perturbed.clone();
    optimize(&mut g, &OptimizeOptions::default()).unwrap();
    let poses: Vec<u64> = g.poses.keys().copied().collect();
    let lms: Vec<u64> = g.landmarks.keys().copied().collect();
    let n = 6 * poses.len() + 3 * lms.len();
    let mut j = DMatrix::zeros(2 * g.factors.len() + 6, n);
    for (row, f) in g.factors.iter().enumerate() {
        let (_, jp, jl, _) = reprojection_jacobians(
            &g.poses[&f.keyframe].pose,
            &g.extrinsics[f.camera],
            &g.landmarks[&f.landmark].position,
            &g.intrinsics[f.camera],
            &f.measurement,
            f.sigma,
        );
        let pi = poses.iter().position(|k| *k == f.keyframe).unwrap();
        let li = lms.iter().position(|k| *k == f.landmark).unwrap();
        j.view_mut((2 * row, 6 * pi), (2, 6)).copy_from(&jp);
        j.view_mut((2 * row, 6 * poses.len() + 3 * li), (2, 3)).copy_from(&jl);
    }
    let base = 2 * g.factors.len();
    for i in 0..6 {
        j[(base + i, i)] = 1e4;
    }
    let h = j.transpose() * &j;
    let eig = h.symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    assert!(min > 1e-12 * max, "min {min} max {max}");
}

#[test]
fn unfrozen_extrinsics_are_recovered() {
    let mut worst_dt = Vec::new();
    for seed in 0..10 {
        let fx = backend_fixture(200 + seed, 0.5, 10, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = fx.perturbed.clone();
        for c in 1..g.extrinsics.len() {
            let e = g.extrinsics[c];
            g.extrinsics[c] = Pose::new(*e.rotation(), e.translation() + uniform_vec(&mut rng, 0.005));
        }
        let opts = OptimizeOptions {
            freeze_extrinsics: false,
            max_iters: 100,
            ..OptimizeOptions::default()
        };
        optimize(&mut g, &opts).unwrap();
        // Scale is a gauge freedom once every extrinsic baseline is free; it
        // is removed before comparing translations.
        let truth: Vec<Vector3<f64>> = fx.truth.extrinsics.iter().map(|e| *e.translation()).collect();
        let est: Vec<Vector3<f64>> = g.extrinsics.iter().map(|e| *e.translation()).collect();
        let s = truth.iter().zip(&est).map(|(a, b)| a.dot(b)).sum::<f64>()
            / est.iter().map(|b| b.norm_squared()).sum::<f64>();
        assert!((s - 1.0).abs() < 0.05, "seed {seed}: scale {s}");
        let mut worst: f64 = 0.0;
        for c in 0..g.extrinsics.len() {
            let dt = (est[c] * s - truth[c]).norm();
            let dr = g.extrinsics[c].angle_to(&fx.truth.extrinsics[c]).to_degrees();
            assert!(dt < 2e-3, "seed {seed} camera {c}: {dt} m");
            assert!(dr < 0.1, "seed {seed} camera {c}: {dr} deg");
            worst = worst.max(dt);
        }
        worst_dt.push(worst);
    }
    // Vertical offsets trade off against pitch at 0.5 px noise, so single
    // seeds can land slightly above 1 mm; the median may not.
    worst_dt.sort_by(f64::total_cmp);
    let median = 0.5 * (worst_dt[4] + worst_dt[5]);
    assert!(median < 1e-3, "median worst-camera error {median} m");
}

#[test]
fn window_optimization_leaves_fixed_poses_alone() {
    let fx = backend_fixture(5, 0.5, 10, 200);
    let g = fx.perturbed.clone();
    let active: BTreeSet<u64> = (5..10).collect();
    let mut sub = marginal_window(&g, &active).unwrap();
    for (k, v) in &sub.poses {
        assert_eq!(v.fixed, !active.contains(k));
    }
    let before = sub.clone();
    let opts = OptimizeOptions::default();
    let report = optimize(&mut sub, &opts).unwrap();
    assert!(report.final_cost < report.initial_cost);
    for (k, v) in &sub.poses {
        if v.fixed {
            assert_eq!(v.pose, before.poses[k].pose);
        }
    }
    let mut full = g.clone();
    full.update_from(&sub);
    for k in 0..5 {
        assert_eq!(full.poses[&k].pose, g.poses[&k].pose);
    }

    let all: BTreeSet<u64> = g.poses.keys().copied().collect();
    assert_eq!(marginal_window(&g, &all).unwrap(), g);

    let last = marginal_window(&g, &BTreeSet::from([9])).unwrap();
    let free: Vec<u64> = last.poses.iter().filter(|(_, v)| !v.fixed).map(|(k, _)| *k).collect();
    assert_eq!(free, vec![9]);
    let seen: BTreeSet<u64> = g.factors.iter().filter(|f| f.keyframe == 9).map(|f| f.landmark).collect();
    assert_eq!(last.landmarks.keys().copied().collect::<BTreeSet<_>>(), seen);
}
