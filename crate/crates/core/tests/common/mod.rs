//! Shared fixtures for integration tests.
#![allow(dead_code)]

use mcslam::backend::{FactorGraph, LandmarkVariable, PosePrior, PoseVariable, ReprojectionFactor};
use mcslam::sim::{make_rig, RigKind, RigSpec};
use mcslam::Pose;
use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct BackendFixture {
    /// True variables with noisy measurements.
    pub truth: FactorGraph,
    /// Same factors, perturbed initial values.
    pub perturbed: FactorGraph,
}

pub fn uniform_vec(rng: &mut impl Rng, half: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
    )
}

/// Forward-moving 3-camera linear rig observing a box of landmarks ahead.
/// Poses are perturbed by up to 2 cm / 1 degree per axis and landmarks by
/// up to 5 cm; keyframe 0 stays at its prior.
pub fn backend_fixture(seed: u64, noise_px: f64, n_keyframes: usize, n_landmarks: usize) -> BackendFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = make_rig(&RigSpec {
        kind: RigKind::OvLinear,
        n_cameras: 3,
        ..RigSpec::default()
    })
    .unwrap();
    let extrinsics: Vec<Pose<f64>> = rig.cameras().iter().map(|c| c.body_t_cam).collect();
    let intrinsics = rig.cameras().iter().map(|c| c.intrinsics).collect();
    let mut truth = FactorGraph::new(extrinsics, intrinsics, 0);
    for k in 0..n_keyframes {
        let yaw = 0.02 * k as f64 * if seed % 2 == 0 { 1.0 } else { -1.0 };
        let pose = Pose::from_yaw(yaw, Vector3::new(0.03 * k as f64, 0.0, 0.12 * k as f64));
        truth.poses.insert(k as u64, PoseVariable { pose, fixed: false });
    }
    let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let mut id = 0u64;
    while truth.landmarks.len() < n_landmarks {
        let p = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(2.5..9.0),
        );
        let mut obs = Vec::new();
        for (k, v) in &truth.poses {
            for c in 0..truth.extrinsics.len() {
                let pc = truth.extrinsics[c].inverse_transform_point(&v.pose.inverse_transform_point(&p));
                let kk = &truth.intrinsics[c];
                if let Ok(u) = kk.project(&pc) {
                    if kk.contains(&u) {
                        let n = if noise_px > 0.0 {
                            Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            Vector2::zeros()
                        };
                        obs.push(ReprojectionFactor {
                            keyframe: *k,
                            camera: c,
                            landmark: id,
                            measurement: u + n,
                            sigma: noise_px.max(0.5),
                        });
                    }
                }
            }
        }
        if obs.len() >= 2 {
            truth.landmarks.insert(id, LandmarkVariable { position: p, fixed: false });
            truth.factors.extend(obs);
            id += 1;
        }
    }
    truth.prior = Some((
        0,
        PosePrior {
            pose: truth.poses[&0].pose,
            sigma_rotation: 1e-4,
            sigma_translation: 1e-4,
        },
    ));
    let mut perturbed = truth.clone();
    let deg = 1f64.to_radians();
    for (k, v) in perturbed.poses.iter_mut() {
        if *k != 0 {
            let w = uniform_vec(&mut rng, deg);
            let t = uniform_vec(&mut rng, 0.02);
            let d = Vector6::new(w.x, w.y, w.z, 0.0, 0.0, 0.0);
            let rotated = v.pose.retract(&d);
            v.pose = Pose::new(*rotated.rotation(), rotated.translation() + t);
        }
    }
    for l in perturbed.landmarks.values_mut() {
        l.position += uniform_vec(&mut rng, 0.05);
    }
    BackendFixture { truth, perturbed }
}
