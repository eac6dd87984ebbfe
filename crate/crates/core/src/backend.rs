//! Factor-graph bundle adjustment over keyframe poses, landmarks and,
//! optionally, camera extrinsics.
//!
//! Poses are `world_T_body` and extrinsics `body_T_cam`, both updated by
//! right perturbation `T * Exp([omega; v])`. Landmarks live in the world
//! frame. Reprojection factors are whitened by their pixel sigma and
//! robustified with a Huber loss; the normal equations are solved by
//! eliminating landmarks through the Schur complement.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};
use serde_json::json;
use thiserror::Error;

use crate::geometry::{skew, Intrinsics, Pose, EPS_DEPTH};

/// Pixel error assigned to an observation whose landmark is behind the camera.
pub const BEHIND_CAMERA_PX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("factor {factor} references missing {what} {id}")]
    MissingVariable { factor: usize, what: &'static str, id: u64 },
    #[error("no observations in the requested window")]
    EmptySubgraph,
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseVariable {
    /// `world_T_body`.
    pub pose: Pose<f64>,
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkVariable {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionFactor {
    pub keyframe: u64,
    pub camera: usize,
    pub landmark: u64,
    pub measurement: Vector2<f64>,
    pub sigma: f64,
}

/// Gaussian prior on a pose, sigmas in radians and meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePrior {
    pub pose: Pose<f64>,
    pub sigma_rotation: f64,
    pub sigma_translation: f64,
}

impl PosePrior {
    /// Whitened `[log(R_p^T R); R_p^T (t - t_p)]`.
    pub fn residual(&self, pose: &Pose<f64>) -> Vector6<f64> {
        let e = self.pose.inverse().compose(pose);
        let w = e.rotation().scaled_axis() / self.sigma_rotation;
        let v = e.translation() / self.sigma_translation;
        Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
    }

    fn whitening(&self) -> Vector6<f64> {
        let (r, t) = (1.0 / self.sigma_rotation, 1.0 / self.sigma_translation);
        Vector6::new(r, r, r, t, t, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    pub poses: BTreeMap<u64, PoseVariable>,
    pub landmarks: BTreeMap<u64, LandmarkVariable>,
    /// `body_T_cam` per camera.
    pub extrinsics: Vec<Pose<f64>>,
    pub intrinsics: Vec<Intrinsics<f64>>,
    /// Camera whose extrinsic stays fixed when extrinsics are optimized.
    pub body_camera: usize,
    pub factors: Vec<ReprojectionFactor>,
    /// Prior on the first keyframe pose `x_0`.
    pub prior: Option<(u64, PosePrior)>,
}

impl FactorGraph {
    pub fn new(extrinsics: Vec<Pose<f64>>, intrinsics: Vec<Intrinsics<f64>>, body_camera: usize) -> Self {
        Self {
            poses: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            extrinsics,
            intrinsics,
            body_camera,
            factors: Vec::new(),
            prior: None,
        }
    }

    /// Every factor references existing variables.
    pub fn validate(&self) -> Result<(), BackendError> {
        for (i, f) in self.factors.iter().enumerate() {
            if !self.poses.contains_key(&f.keyframe) {
                return Err(BackendError::MissingVariable {
                    factor: i,
                    what: "keyframe",
                    id: f.keyframe,
                });
            }
            if !self.landmarks.contains_key(&f.landmark) {
                return Err(BackendError::MissingVariable {
                    factor: i,
                    what: "landmark",
                    id: f.landmark,
                });
            }
            if f.camera >= self.extrinsics.len() || f.camera >= self.intrinsics.len() {
                return Err(BackendError::MissingVariable {
                    factor: i,
                    what: "camera",
                    id: f.camera as u64,
                });
            }
        }
        if let Some((k, _)) = &self.prior {
            if !self.poses.contains_key(k) {
                return Err(BackendError::MissingVariable {
                    factor: usize::MAX,
                    what: "prior keyframe",
                    id: *k,
                });
            }
        }
        Ok(())
    }

    /// Whitened residual `(h(x, l, c) - z) / sigma` of one factor.
    pub fn residual(&self, f: &ReprojectionFactor) -> Vector2<f64> {
        reprojection_residual(
            &self.poses[&f.keyframe].pose,
            &self.extrinsics[f.camera],
            &self.landmarks[&f.landmark].position,
            &self.intrinsics[f.camera],
            &f.measurement,
            f.sigma,
        )
    }

    /// Robustified total cost (no one-half factor), including priors.
    pub fn cost(&self, options: &OptimizeOptions) -> f64 {
        self.cost_with_extrinsic_priors(options, None)
    }

    fn cost_with_extrinsic_priors(&self, options: &OptimizeOptions, ext_priors: Option<&[Option<PosePrior>]>) -> f64 {
        let mut c = 0.0;
        for f in &self.factors {
            let r = self.residual(f);
            c += huber_cost(r.norm_squared(), options.huber_delta / f.sigma);
        }
        if let Some((k, p)) = &self.prior {
            c += p.residual(&self.poses[k].pose).norm_squared();
        }
        if let Some(priors) = ext_priors {
            for (cam, p) in priors.iter().enumerate() {
                if let Some(p) = p {
                    c += p.residual(&self.extrinsics[cam]).norm_squared();
                }
            }
        }
        c
    }

    /// RMS over pixel coordinates of the unwhitened reprojection error, so
    /// that isotropic noise of sigma per axis gives an RMS near sigma.
    pub fn rms_reprojection_px(&self) -> f64 {
        if self.factors.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .factors
            .iter()
            .map(|f| (self.residual(f) * f.sigma).norm_squared())
            .sum();
        (s / (2 * self.factors.len()) as f64).sqrt()
    }

    /// Copies the free variables of `sub` back into this graph.
    pub fn update_from(&mut self, sub: &FactorGraph) {
        for (k, v) in &sub.poses {
            if !v.fixed {
                if let Some(p) = self.poses.get_mut(k) {
                    p.pose = v.pose;
                }
            }
        }
        for (k, v) in &sub.landmarks {
            if !v.fixed {
                if let Some(l) = self.landmarks.get_mut(k) {
                    l.position = v.position;
                }
            }
        }
        self.extrinsics = sub.extrinsics.clone();
    }

    /// Variables and factors as pretty-printed JSON, for offline inspection.
    pub fn debug_dump(&self) -> String {
        let pose = |p: &Pose<f64>| {
            let q = p.rotation().quaternion();
            let t = p.translation();
            json!({"t_xyz": [t.x, t.y, t.z], "q_wxyz": [q.w, q.i, q.j, q.k]})
        };
        let doc = json!({
            "poses": self.poses.iter().map(|(k, v)| json!({"id": k, "fixed": v.fixed, "pose": pose(&v.pose)})).collect::<Vec<_>>(),
            "landmarks": self.landmarks.iter().map(|(k, v)| json!({"id": k, "fixed": v.fixed, "xyz": [v.position.x, v.position.y, v.position.z]})).collect::<Vec<_>>(),
            "extrinsics": self.extrinsics.iter().map(pose).collect::<Vec<_>>(),
            "prior": self.prior.as_ref().map(|(k, p)| json!({"keyframe": k, "pose": pose(&p.pose), "sigma_rotation": p.sigma_rotation, "sigma_translation": p.sigma_translation})),
            "factors": self.factors.iter().map(|f| {
                let r = self.residual(f);
                json!({
                    "keyframe": f.keyframe, "camera": f.camera, "landmark": f.landmark,
                    "z": [f.measurement.x, f.measurement.y], "sigma": f.sigma,
                    "residual": [r.x, r.y],
                })
            }).collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).expect("serializable")
    }
}

/// Whitened reprojection residual. A landmark at or behind the image plane
/// yields a residual of `BEHIND_CAMERA_PX / sigma` along x.
pub fn reprojection_residual(
    w_t_b: &Pose<f64>,
    b_t_c: &Pose<f64>,
    landmark: &Vector3<f64>,
    k: &Intrinsics<f64>,
    z: &Vector2<f64>,
    sigma: f64,
) -> Vector2<f64> {
    let pc = b_t_c.inverse_transform_point(&w_t_b.inverse_transform_point(landmark));
    match k.project(&pc) {
        Ok(u) => (u - z) / sigma,
        Err(_) => Vector2::new(BEHIND_CAMERA_PX / sigma, 0.0),
    }
}

/// Residual and Jacobians with respect to the pose, landmark and extrinsic
/// perturbations. Behind-camera observations get zero Jacobians.
pub fn reprojection_jacobians(
    w_t_b: &Pose<f64>,
    b_t_c: &Pose<f64>,
    landmark: &Vector3<f64>,
    k: &Intrinsics<f64>,
    z: &Vector2<f64>,
    sigma: f64,
) -> (Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>, Matrix2x6<f64>) {
    let r_wb = w_t_b.rotation_matrix();
    let r_bc = b_t_c.rotation_matrix();
    let pb = w_t_b.inverse_transform_point(landmark);
    let pc = b_t_c.inverse_transform_point(&pb);
    if pc.z <= EPS_DEPTH {
        return (
            Vector2::new(BEHIND_CAMERA_PX / sigma, 0.0),
            Matrix2x6::zeros(),
            Matrix2x3::zeros(),
            Matrix2x6::zeros(),
        );
    }
    let inv_z = 1.0 / pc.z;
    let u = Vector2::new(k.fx * pc.x * inv_z + k.cx, k.fy * pc.y * inv_z + k.cy);
    let d_proj = Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * pc.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * pc.y * inv_z * inv_z,
    ) / sigma;
    let r_cb = r_bc.transpose();
    let mut d_pb_pose = Matrix3x6::zeros();
    d_pb_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pb));
    d_pb_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    let mut d_pc_ext = Matrix3x6::zeros();
    d_pc_ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pc));
    d_pc_ext.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    (
        (u - z) / sigma,
        d_proj * r_cb * d_pb_pose,
        d_proj * r_cb * r_wb.transpose(),
        d_proj * d_pc_ext,
    )
}

fn huber_cost(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    pub freeze_extrinsics: bool,
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    /// Prior sigmas on unfrozen extrinsics, radians and meters.
    pub extrinsic_prior_rotation: f64,
    pub extrinsic_prior_translation: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            freeze_extrinsics: true,
            huber_delta: 2.0,
            relative_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            extrinsic_prior_rotation: 0.5f64.to_radians(),
            extrinsic_prior_translation: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost before the first and after every accepted step.
    pub cost_history: Vec<f64>,
}

/// Index of each free block in the reduced (pose + extrinsic) system.
struct Layout {
    poses: BTreeMap<u64, usize>,
    extrinsics: BTreeMap<usize, usize>,
    dim: usize,
}

/// Levenberg-Marquardt on the graph, updating it in place.
pub fn optimize(graph: &mut FactorGraph, options: &OptimizeOptions) -> Result<OptimizeReport, BackendError> {
    graph.validate()?;
    let mut layout = Layout {
        poses: BTreeMap::new(),
        extrinsics: BTreeMap::new(),
        dim: 0,
    };
    for (k, v) in &graph.poses {
        if !v.fixed {
            layout.poses.insert(*k, layout.dim);
            layout.dim += 6;
        }
    }
    let ext_priors: Vec<Option<PosePrior>> = (0..graph.extrinsics.len())
        .map(|c| {
            (!options.freeze_extrinsics && c != graph.body_camera).then(|| PosePrior {
                pose: graph.extrinsics[c],
                sigma_rotation: options.extrinsic_prior_rotation,
                sigma_translation: options.extrinsic_prior_translation,
            })
        })
        .collect();
    for (c, p) in ext_priors.iter().enumerate() {
        if p.is_some() {
            layout.extrinsics.insert(c, layout.dim);
            layout.dim += 6;
        }
    }

    let mut cost = graph.cost_with_extrinsic_priors(options, Some(&ext_priors));
    let mut report = OptimizeReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        cost_history: vec![cost],
    };
    let mut lambda = 1e-4;
    while report.iterations < options.max_iters {
        if cost < 1e-14 {
            break;
        }
        report.iterations += 1;
        let lin = linearize(graph, options, &layout, &ext_priors);
        if lin.gradient_norm() < options.gradient_tolerance {
            break;
        }
        let mut accepted = false;
        let mut last_error = String::new();
        while lambda <= 1e12 {
            let step = match lin.solve(lambda) {
                Ok(s) => s,
                Err(e) => {
                    last_error = e;
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut cand = graph.clone();
            apply_step(&mut cand, &layout, &lin.landmark_order, &step);
            let new_cost = cand.cost_with_extrinsic_priors(options, Some(&ext_priors));
            if new_cost.is_finite() && new_cost < cost {
                let rel = (cost - new_cost) / cost;
                *graph = cand;
                cost = new_cost;
                report.cost_history.push(cost);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < options.relative_tolerance {
                    report.final_cost = cost;
                    return Ok(report);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            if !last_error.is_empty() && report.cost_history.len() == 1 {
                return Err(BackendError::OptimizationFailed(format!(
                    "{last_error} (cost {cost:.6e}, {} variables)",
                    layout.dim
                )));
            }
            break;
        }
    }
    report.final_cost = cost;
    Ok(report)
}

struct LandmarkBlock {
    h_ll: Matrix3<f64>,
    g_l: Vector3<f64>,
    /// `J_v^T J_l` per reduced-system offset.
    w: BTreeMap<usize, Matrix3x6T>,
}

type Matrix3x6T = nalgebra::Matrix6x3<f64>;

struct Linearization {
    h: DMatrix<f64>,
    g: DVector<f64>,
    landmarks: Vec<LandmarkBlock>,
    landmark_order: Vec<u64>,
}

fn linearize(graph: &FactorGraph, options: &OptimizeOptions, layout: &Layout, ext_priors: &[Option<PosePrior>]) -> Linearization {
    let mut h = DMatrix::zeros(layout.dim, layout.dim);
    let mut g = DVector::zeros(layout.dim);
    let landmark_order: Vec<u64> = graph.landmarks.iter().filter(|(_, v)| !v.fixed).map(|(k, _)| *k).collect();
    let slot: BTreeMap<u64, usize> = landmark_order.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut landmarks: Vec<LandmarkBlock> = landmark_order
        .iter()
        .map(|_| LandmarkBlock {
            h_ll: Matrix3::zeros(),
            g_l: Vector3::zeros(),
            w: BTreeMap::new(),
        })
        .collect();

    for f in &graph.factors {
        let (r, j_pose, j_lm, j_ext) = reprojection_jacobians(
            &graph.poses[&f.keyframe].pose,
            &graph.extrinsics[f.camera],
            &graph.landmarks[&f.landmark].position,
            &graph.intrinsics[f.camera],
            &f.measurement,
            f.sigma,
        );
        let wgt = huber_weight(r.norm_squared(), options.huber_delta / f.sigma);
        let mut blocks: Vec<(usize, Matrix2x6<f64>)> = Vec::with_capacity(2);
        if let Some(&o) = layout.poses.get(&f.keyframe) {
            blocks.push((o, j_pose));
        }
        if let Some(&o) = layout.extrinsics.get(&f.camera) {
            blocks.push((o, j_ext));
        }
        for (a, ja) in &blocks {
            let ga = ja.transpose() * r * wgt;
            for k in 0..6 {
                g[a + k] += ga[k];
            }
            for (b, jb) in &blocks {
                let hab = ja.transpose() * jb * wgt;
                let mut view = h.view_mut((*a, *b), (6, 6));
                view += hab;
            }
        }
        if let Some(&li) = slot.get(&f.landmark) {
            let lb = &mut landmarks[li];
            lb.h_ll += j_lm.transpose() * j_lm * wgt;
            lb.g_l += j_lm.transpose() * r * wgt;
            for (a, ja) in &blocks {
                *lb.w.entry(*a).or_insert_with(Matrix3x6T::zeros) += ja.transpose() * j_lm * wgt;
            }
        }
    }
    let mut add_prior = |offset: usize, prior: &PosePrior, pose: &Pose<f64>| {
        let r = prior.residual(pose);
        let wv = prior.whitening();
        for k in 0..6 {
            h[(offset + k, offset + k)] += wv[k] * wv[k];
            g[offset + k] += wv[k] * r[k];
        }
    };
    if let Some((k, p)) = &graph.prior {
        if let Some(&o) = layout.poses.get(k) {
            add_prior(o, p, &graph.poses[k].pose);
        }
    }
    for (c, p) in ext_priors.iter().enumerate() {
        if let (Some(p), Some(&o)) = (p, layout.extrinsics.get(&c)) {
            add_prior(o, p, &graph.extrinsics[c]);
        }
    }
    Linearization {
        h,
        g,
        landmarks,
        landmark_order,
    }
}

impl Linearization {
    fn gradient_norm(&self) -> f64 {
        let gl: f64 = self.landmarks.iter().map(|l| l.g_l.norm_squared()).sum();
        (self.g.norm_squared() + gl).sqrt()
    }

    /// Damped step: reduced-system increments followed by landmark increments.
    fn solve(&self, lambda: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>), String> {
        let n = self.g.len();
        let mut s = self.h.clone();
        let floor = 1e-9;
        for i in 0..n {
            s[(i, i)] += lambda * self.h[(i, i)].max(floor);
        }
        let mut rhs = -self.g.clone();
        let mut damped_inv = Vec::with_capacity(self.landmarks.len());
        for lb in &self.landmarks {
            let mut hll = lb.h_ll;
            for i in 0..3 {
                hll[(i, i)] += lambda * lb.h_ll[(i, i)].max(floor);
            }
            let inv = hll
                .try_inverse()
                .ok_or_else(|| "singular landmark block".to_string())?;
            for (a, wa) in &lb.w {
                let wa_inv = wa * inv;
                let ra = wa_inv * lb.g_l;
                for k in 0..6 {
                    rhs[a + k] += ra[k];
                }
                for (b, wb) in &lb.w {
                    let sab = wa_inv * wb.transpose();
                    let mut view = s.view_mut((*a, *b), (6, 6));
                    view -= sab;
                }
            }
            damped_inv.push(inv);
        }
        let dx = if n == 0 {
            DVector::zeros(0)
        } else {
            s.cholesky()
                .ok_or_else(|| "reduced system not positive definite".to_string())?
                .solve(&rhs)
        };
        let dl = self
            .landmarks
            .iter()
            .zip(&damped_inv)
            .map(|(lb, inv)| {
                let mut b = -lb.g_l;
                for (a, wa) in &lb.w {
                    let xa = Vector6::from_iterator(dx.rows(*a, 6).iter().copied());
                    b -= wa.transpose() * xa;
                }
                inv * b
            })
            .collect();
        Ok((dx, dl))
    }
}

fn apply_step(graph: &mut FactorGraph, layout: &Layout, order: &[u64], step: &(DVector<f64>, Vec<Vector3<f64>>)) {
    let (dx, dl) = step;
    let block = |o: usize| Vector6::from_iterator(dx.rows(o, 6).iter().copied());
    for (k, &o) in &layout.poses {
        let p = graph.poses.get_mut(k).expect("layout key");
        p.pose = p.pose.retract(&block(o));
    }
    for (&c, &o) in &layout.extrinsics {
        graph.extrinsics[c] = graph.extrinsics[c].retract(&block(o));
    }
    for (k, d) in order.iter().zip(dl) {
        graph.landmarks.get_mut(k).expect("landmark key").position += d;
    }
}

/// Subgraph for local bundle adjustment: poses in `active` free, every
/// landmark they observe free, all other poses observing those landmarks
/// fixed. The pose prior is kept only if its keyframe is active.
pub fn marginal_window(graph: &FactorGraph, active: &BTreeSet<u64>) -> Result<FactorGraph, BackendError> {
    let lms: BTreeSet<u64> = graph
        .factors
        .iter()
        .filter(|f| active.contains(&f.keyframe))
        .map(|f| f.landmark)
        .collect();
    if lms.is_empty() {
        return Err(BackendError::EmptySubgraph);
    }
    let factors: Vec<ReprojectionFactor> = graph
        .factors
        .iter()
        .filter(|f| lms.contains(&f.landmark))
        .copied()
        .collect();
    let mut sub = FactorGraph::new(graph.extrinsics.clone(), graph.intrinsics.clone(), graph.body_camera);
    for f in &factors {
        let v = graph.poses[&f.keyframe];
        sub.poses.entry(f.keyframe).or_insert(PoseVariable {
            pose: v.pose,
            fixed: v.fixed || !active.contains(&f.keyframe),
        });
    }
    for k in active {
        if let Some(v) = graph.poses.get(k) {
            sub.poses.entry(*k).or_insert(*v);
        }
    }
    for l in &lms {
        sub.landmarks.insert(*l, graph.landmarks[l]);
    }
    sub.factors = factors;
    sub.prior = graph.prior.filter(|(k, _)| active.contains(k));
    Ok(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_k() -> Intrinsics<f64> {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap()
    }

    #[test]
    fn residual_sign_convention() {
        let r = |z: Vector2<f64>| {
            reprojection_residual(&Pose::identity(), &Pose::identity(), &Vector3::new(0.0, 0.0, 2.0), &unit_k(), &z, 1.0)
        };
        assert_eq!(r(Vector2::zeros()), Vector2::zeros());
        assert_eq!(r(Vector2::new(1.0, 0.0)), Vector2::new(-1.0, 0.0));
    }

    #[test]
    fn behind_camera_is_capped() {
        let (r, jp, jl, je) = reprojection_jacobians(
            &Pose::identity(),
            &Pose::identity(),
            &Vector3::new(0.0, 0.0, -2.0),
            &unit_k(),
            &Vector2::zeros(),
            2.0,
        );
        assert_eq!(r, Vector2::new(500.0, 0.0));
        assert!(jp.norm() == 0.0 && jl.norm() == 0.0 && je.norm() == 0.0);
    }

    #[test]
    fn huber_is_continuous() {
        let d = 2.0;
        assert!((huber_cost(4.0 - 1e-12, d) - huber_cost(4.0 + 1e-12, d)).abs() < 1e-9);
        assert_eq!(huber_weight(1.0, d), 1.0);
        assert!((huber_weight(16.0, d) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_variables_are_reported() {
        let mut g = FactorGraph::new(vec![Pose::identity()], vec![unit_k()], 0);
        g.factors.push(ReprojectionFactor {
            keyframe: 3,
            camera: 0,
            landmark: 1,
            measurement: Vector2::zeros(),
            sigma: 1.0,
        });
        assert!(matches!(
            optimize(&mut g, &OptimizeOptions::default()),
            Err(BackendError::MissingVariable { what: "keyframe", .. })
        ));
        assert_eq!(
            marginal_window(&g, &BTreeSet::from([7])),
            Err(BackendError::EmptySubgraph)
        );
    }
}
