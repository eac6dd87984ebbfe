use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use super::lm::{apply_left, lm_pose};
use super::triangulation::two_ray_depths;
use super::{Estimator, SolverError};
use crate::geometry::{nearest_rotation, PluckerRay, Pose};
use crate::scalar::{lit, to_f64, Real};

/// The same physical point seen as a ray from two rig poses `a` and `b`,
/// each with the centre of the camera that observed it (body frame).
///
/// The centres do not enter the linear solve; they decide cheirality. When
/// every match comes from the same camera at both poses, `(E, R) = (0, I)`
/// satisfies every epipolar equation exactly, and only depths measured from
/// the true centres separate it from the real motion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayCorrespondence<T: Real> {
    pub a: PluckerRay<T>,
    pub b: PluckerRay<T>,
    pub center_a: Vector3<T>,
    pub center_b: Vector3<T>,
}

impl<T: Real> RayCorrespondence<T> {
    /// Rays whose centres are unknown; each line's point closest to the body
    /// origin stands in for its centre.
    pub fn new(a: PluckerRay<T>, b: PluckerRay<T>) -> Self {
        Self {
            a,
            b,
            center_a: a.closest_point_to_origin(),
            center_b: b.closest_point_to_origin(),
        }
    }

    pub fn with_centers(a: PluckerRay<T>, center_a: Vector3<T>, b: PluckerRay<T>, center_b: Vector3<T>) -> Self {
        Self {
            a,
            b,
            center_a,
            center_b,
        }
    }

    /// Depths from each camera centre of the mutually closest points of the
    /// two rays under `b_T_a`, and their midpoint in frame a. `None` when
    /// the rays are parallel.
    pub fn depths(&self, b_t_a: &Pose<T>) -> Option<(T, T, Vector3<T>)> {
        let a_t_b = b_t_a.inverse();
        let rb = self.b.transform(&a_t_b);
        let cb = a_t_b.transform_point(&self.center_b);
        let (s, t, mid) = two_ray_depths(&self.a, &rb)?;
        let pa = self.a.closest_point_to_origin() + self.a.direction * s;
        let pb = rb.closest_point_to_origin() + rb.direction * t;
        Some(((pa - self.center_a).dot(&self.a.direction), (pb - cb).dot(&rb.direction), mid))
    }

    fn depth_margin(&self) -> T {
        lit::<T>(1e-9) * T::one().max(self.center_a.norm()).max(self.center_b.norm())
    }
}

/// Generalized epipolar residual
/// `q_b^T E q_a + q_b^T R q_a' + q_b'^T R q_a` for `b_T_a = (R, t)`, `E = [t]_x R`.
pub fn generalized_epipolar_residual<T: Real>(b_t_a: &Pose<T>, c: &RayCorrespondence<T>) -> T {
    let r = b_t_a.rotation_matrix();
    let rq = r * c.a.direction;
    let rm = r * c.a.moment;
    c.b.direction.dot(&b_t_a.translation().cross(&rq)) + c.b.direction.dot(&rm) + c.b.moment.dot(&rq)
}

/// Classical epipolar residual `x_b^T E x_a`.
pub fn classical_epipolar_residual<T: Real>(e: &Matrix3<T>, x_a: &Vector3<T>, x_b: &Vector3<T>) -> T {
    x_b.dot(&(e * x_a))
}

/// Relative pose `b_T_a` of a generalized camera from at least 17 ray
/// correspondences, with metric translation.
///
/// The linear system over the 18 entries of `(E, R)` is solved through its
/// null space, rotation candidates are extracted from the essential block
/// (and, for near-zero translation, from the rotation block and ray
/// directions), the translation is recovered by linear least squares for each
/// rotation, every candidate is polished on the epipolar residuals, and the
/// best one by residual and cheirality vote is returned.
pub fn solve_rel_pose_generalized<T: Real>(corrs: &[RayCorrespondence<T>]) -> Result<Pose<T>, SolverError> {
    if corrs.len() < 17 {
        return Err(SolverError::InsufficientData {
            needed: 17,
            got: corrs.len(),
        });
    }
    if is_central(corrs.iter().map(|c| &c.a)) && is_central(corrs.iter().map(|c| &c.b)) {
        return Err(SolverError::Degenerate(
            "all rays pass through a single center; metric scale is unobservable".into(),
        ));
    }

    let mut design = DMatrix::<T>::zeros(corrs.len(), 18);
    for (row, c) in corrs.iter().enumerate() {
        let (q1, m1, q2, m2) = (c.a.direction, c.a.moment, c.b.direction, c.b.moment);
        for i in 0..3 {
            for j in 0..3 {
                design[(row, 3 * i + j)] = q2[i] * q1[j];
                design[(row, 9 + 3 * i + j)] = q2[i] * m1[j] + m2[i] * q1[j];
            }
        }
        let n = design.row(row).norm();
        if n > T::zero() {
            design.row_mut(row).unscale_mut(n);
        }
    }
    let ata = design.transpose() * &design;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..18).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let v0 = eig.eigenvectors.column(order[0]).into_owned();
    let v1 = eig.eigenvectors.column(order[1]).into_owned();
    let block = |v: &nalgebra::DVector<T>, off: usize| {
        Matrix3::from_fn(|i, j| v[off + 3 * i + j])
    };

    let mut rotations: Vec<Matrix3<T>> = Vec::new();
    let e0 = block(&v0, 0);
    rotations.extend(essential_rotations(&e0));
    // Axial and locally-central rigs add spurious null vectors with zero
    // essential block; the essential direction of the 2D null space survives.
    let e_mix = dominant_essential(&e0, &block(&v1, 0));
    rotations.extend(essential_rotations(&e_mix));
    let mut r_block = block(&v0, 9);
    if r_block.determinant() < T::zero() {
        r_block = -r_block;
    }
    rotations.push(nearest_rotation(&r_block));
    // Axial rigs (every centre on one line, e.g. any two cameras) have an
    // exact two-dimensional null space whose spurious vector need not have a
    // zero essential block; the true rotation block is then the member of
    // the pencil that is a scaled rotation. Larger null spaces (no motion)
    // are left to the other candidates.
    let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if l1 <= l2 * lit(0.1) && l2 > eig.eigenvalues[order[17]] * lit(1e-8) {
        rotations.extend(pencil_rotations(&block(&v0, 9), &block(&v1, 9)));
    }
    rotations.push(direction_alignment(corrs));

    let mut candidates = Vec::new();
    for rot in &rotations {
        if !rot.iter().all(|v| v.is_finite()) {
            continue;
        }
        let t = solve_translation(rot, corrs);
        let pose = polish(Pose::from_matrix(rot, t), corrs, 30);
        let mut rms = rms_residual(&pose, corrs);
        let mut pose = pose;
        // Prefer the minimum-norm translation when it explains the data as well.
        let alt = Pose::new(*pose.rotation(), solve_translation(&pose.rotation_matrix(), corrs));
        let alt_rms = rms_residual(&alt, corrs);
        if alt_rms <= rms * lit(1.0 + 1e-9) {
            pose = alt;
            rms = alt_rms;
        }
        candidates.push((pose, rms));
    }
    let pure = Pose::from_matrix(rotations.last().expect("alignment candidate"), Vector3::zeros());
    candidates.push((pure, rms_residual(&pure, corrs)));

    // (E, R) = (0, I) zeroes the residual of every pair of rays that share
    // a camera centre, so residual alone cannot rank candidates. Candidates
    // that put most points at or behind a camera are dropped when any other
    // candidate avoids that; parallel pairs (no parallax) count neither way.
    // Among the rest: best residual, then smallest translation.
    let scored: Vec<(Pose<T>, T, usize)> = candidates
        .into_iter()
        .filter(|c| c.1.is_finite())
        .map(|(p, r)| {
            let v = cheirality_violations(&p, corrs);
            (p, r, v)
        })
        .collect();
    let sound: Vec<&(Pose<T>, T, usize)> = scored.iter().filter(|c| 2 * c.2 <= corrs.len()).collect();
    let eligible: Vec<&(Pose<T>, T, usize)> =
        if sound.is_empty() { scored.iter().collect() } else { sound };
    let min_rms = eligible
        .iter()
        .map(|c| c.1)
        .fold(T::max_value().unwrap(), |a, b| a.min(b));
    let tol = (min_rms * lit(3.0)).max(lit(1e-12));
    let mut best: Option<(Pose<T>, T, usize)> = None;
    for &&(pose, rms, votes) in &eligible {
        if !(rms <= tol) {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bp, br, _)) => {
                pose.translation().norm() < bp.translation().norm() * lit(1.0 - 1e-9)
                    || ((pose.translation().norm() - bp.translation().norm()).abs()
                        <= bp.translation().norm() * lit(1e-9)
                        && rms < *br)
            }
        };
        if better {
            best = Some((pose, rms, votes));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| SolverError::Numerical("no finite relative pose candidate".into()))
}

/// Whether every ray passes (to numerical precision) through one point.
fn is_central<'a, T: Real + 'a>(rays: impl Iterator<Item = &'a PluckerRay<T>> + Clone) -> bool {
    let mut a = Matrix3::<T>::zeros();
    let mut b = Vector3::<T>::zeros();
    let mut n = 0usize;
    let mut scale = T::zero();
    for r in rays.clone() {
        let proj = Matrix3::identity() - r.direction * r.direction.transpose();
        let foot = r.closest_point_to_origin();
        a += proj;
        b += proj * foot;
        scale = scale.max(foot.norm());
        n += 1;
    }
    if scale == T::zero() {
        return true;
    }
    let Some(center) = a.pseudo_inverse(lit(1e-12)).ok().map(|p| p * b) else {
        return false;
    };
    let mut worst = T::zero();
    for r in rays {
        worst = worst.max(crate::geometry::ray_point_residual(r, &center).norm());
    }
    let _ = n;
    worst <= scale * T::default_epsilon().sqrt()
}

fn essential_rotations<T: Real>(e: &Matrix3<T>) -> Vec<Matrix3<T>> {
    if e.norm() <= T::default_epsilon() {
        return Vec::new();
    }
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut v_t)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    if u.determinant() < T::zero() {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < T::zero() {
        v_t.row_mut(2).neg_mut();
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
    vec![u * w * v_t, u * w.transpose() * v_t]
}

/// Rotations nearest to the members `a cos(θ) + b sin(θ)` of a pencil that
/// are locally closest to a scaled rotation.
fn pencil_rotations<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Vec<Matrix3<T>> {
    let member = |th: T| a * th.cos() + b * th.sin();
    let misfit = |th: T| {
        let m = member(th);
        let g = m.transpose() * m;
        let tr = g.trace();
        if !(tr > T::zero()) {
            return T::max_value().unwrap();
        }
        (g - Matrix3::identity() * (tr / lit(3.0))).norm_squared() / (tr * tr)
    };
    // The misfit has period π; sample it, then refine each local minimum.
    let n = 180;
    let step = T::pi() / lit(n as f64);
    let f: Vec<T> = (0..n).map(|k| misfit(step * lit(k as f64))).collect();
    let mut out = Vec::new();
    for k in 0..n {
        if f[k] > f[(k + n - 1) % n] || f[k] > f[(k + 1) % n] {
            continue;
        }
        let (mut lo, mut hi) = (step * lit(k as f64 - 1.0), step * lit(k as f64 + 1.0));
        let g = lit::<T>(0.5 * (5f64.sqrt() - 1.0));
        for _ in 0..80 {
            let x1 = hi - (hi - lo) * g;
            let x2 = lo + (hi - lo) * g;
            if misfit(x1) < misfit(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        let mut m = member((lo + hi) * lit(0.5));
        if m.determinant() < T::zero() {
            m = -m;
        }
        out.push(nearest_rotation(&m));
    }
    out
}

/// Dominant direction of two 3x3 blocks viewed as 9-vectors.
fn dominant_essential<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Matrix3<T> {
    let (aa, bb, ab) = (a.dot(a), b.dot(b), a.dot(b));
    // Largest eigenvector of [[aa, ab], [ab, bb]].
    let half = (aa - bb) * lit(0.5);
    let theta = ab.atan2(half) * lit(0.5);
    a * theta.cos() + b * theta.sin()
}

/// Rotation best aligning ray directions of frame `a` onto frame `b`.
fn direction_alignment<T: Real>(corrs: &[RayCorrespondence<T>]) -> Matrix3<T> {
    let mut h = Matrix3::<T>::zeros();
    for c in corrs {
        h += c.b.direction * c.a.direction.transpose();
    }
    nearest_rotation(&h)
}

/// Metric translation for a fixed rotation: each correspondence gives
/// `t . (R q_a x q_b) = -(q_b . R q_a' + q_b' . R q_a)`.
pub(crate) fn solve_translation<T: Real>(rot: &Matrix3<T>, corrs: &[RayCorrespondence<T>]) -> Vector3<T> {
    let mut mtm = Matrix3::<T>::zeros();
    let mut mty = Vector3::<T>::zeros();
    for c in corrs {
        let rq = rot * c.a.direction;
        let row = rq.cross(&c.b.direction);
        let y = -(c.b.direction.dot(&(rot * c.a.moment)) + c.b.moment.dot(&rq));
        mtm += row * row.transpose();
        mty += row * y;
    }
    // Rows are sines of ray parallax; directions below ~1e-6 rad are unobservable.
    let eig = mtm.symmetric_eigen();
    let floor = (eig.eigenvalues.max() * lit(1e-10)).max(lit(corrs.len() as f64 * 1e-12));
    let mut t = Vector3::zeros();
    for k in 0..3 {
        let l = eig.eigenvalues[k];
        if l > floor {
            let v = eig.eigenvectors.column(k);
            t += v * (v.dot(&mty) / l);
        }
    }
    t
}

/// Unit translation direction for a fixed rotation, ignoring the metric
/// (moment) terms, signed by cheirality. This is what remains observable
/// when the rig only translates and every match stays within one camera:
/// each camera then undergoes the same motion and scale drops out.
pub fn translation_direction<T: Real>(rot: &Matrix3<T>, corrs: &[RayCorrespondence<T>]) -> Option<Vector3<T>> {
    let mut mtm = Matrix3::<T>::zeros();
    for c in corrs {
        let row = (rot * c.a.direction).cross(&c.b.direction);
        mtm += row * row.transpose();
    }
    let eig = mtm.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let mut order = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    order.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    // The null direction must be isolated from the other two.
    if !(order[1] > order[0] * lit(10.0)) {
        return None;
    }
    let dir: Vector3<T> = eig.eigenvectors.column(k).into_owned();
    let votes = |t: Vector3<T>| cheirality_votes(&Pose::from_matrix(rot, t), corrs);
    Some(if votes(dir) >= votes(-dir) { dir } else { -dir })
}

/// Relative standard deviation of the metric baseline ‖t‖ under `b_t_a`,
/// from the residual spread and the translation normal equations with the
/// rotation held fixed. Large values mean the data pins down the direction
/// of travel but not its length (pure translation with per-camera matches).
pub fn translation_scale_spread<T: Real>(b_t_a: &Pose<T>, corrs: &[RayCorrespondence<T>]) -> T {
    let t = *b_t_a.translation();
    let norm = t.norm();
    if corrs.len() <= 6 || !(norm > T::zero()) {
        return T::max_value().unwrap();
    }
    let rot = b_t_a.rotation_matrix();
    let mut mtm = Matrix3::<T>::zeros();
    let mut ss = T::zero();
    for c in corrs {
        let row = (rot * c.a.direction).cross(&c.b.direction);
        mtm += row * row.transpose();
        let r = generalized_epipolar_residual(b_t_a, c);
        ss += r * r;
    }
    let var = ss / lit((corrs.len() - 6) as f64);
    let Some(inv) = mtm.try_inverse() else {
        return T::max_value().unwrap();
    };
    let u = t / norm;
    let along = (u.dot(&(inv * u)) * var).max(T::zero()).sqrt();
    along / norm
}

fn rms_residual<T: Real>(pose: &Pose<T>, corrs: &[RayCorrespondence<T>]) -> T {
    let s = corrs
        .iter()
        .map(|c| {
            let r = generalized_epipolar_residual(pose, c);
            r * r
        })
        .fold(T::zero(), |a, b| a + b);
    (s / lit(corrs.len() as f64)).sqrt()
}

fn cheirality_votes<T: Real>(b_t_a: &Pose<T>, corrs: &[RayCorrespondence<T>]) -> usize {
    corrs
        .iter()
        .filter(|c| {
            let m = c.depth_margin();
            matches!(c.depths(b_t_a), Some((s, t, _)) if s > m && t > m)
        })
        .count()
}

/// Pairs whose closest points lie at or behind either camera centre.
fn cheirality_violations<T: Real>(b_t_a: &Pose<T>, corrs: &[RayCorrespondence<T>]) -> usize {
    corrs
        .iter()
        .filter(|c| {
            let m = c.depth_margin();
            matches!(c.depths(b_t_a), Some((s, t, _)) if s <= m || t <= m)
        })
        .count()
}

/// Levenberg-Marquardt on the generalized epipolar residuals.
fn polish<T: Real>(init: Pose<T>, corrs: &[RayCorrespondence<T>], iterations: usize) -> Pose<T> {
    let normal = |pose: &Pose<T>| {
        let r = pose.rotation_matrix();
        let t = *pose.translation();
        let mut h = Matrix6::<T>::zeros();
        let mut g = Vector6::<T>::zeros();
        let mut cost = T::zero();
        for c in corrs {
            let (q1, m1, q2, m2) = (c.a.direction, c.a.moment, c.b.direction, c.b.moment);
            let rq = r * q1;
            let rm = r * m1;
            let res = q2.dot(&t.cross(&rq)) + q2.dot(&rm) + m2.dot(&rq);
            let d_omega = rq.cross(&q2.cross(&t)) + rm.cross(&q2) + rq.cross(&m2);
            let d_t = rq.cross(&q2);
            let j = Vector6::new(d_omega.x, d_omega.y, d_omega.z, d_t.x, d_t.y, d_t.z);
            h += j * j.transpose();
            g += j * res;
            cost += res * res;
        }
        (cost, h, g)
    };
    let cost = |pose: &Pose<T>| {
        corrs
            .iter()
            .map(|c| {
                let r = generalized_epipolar_residual(pose, c);
                r * r
            })
            .fold(T::zero(), |a, b| a + b)
    };
    lm_pose(init, iterations, lit(1e-15), apply_left, normal, cost).pose
}

/// RANSAC adapter for [`solve_rel_pose_generalized`].
///
/// Residuals are the larger angle, over both cameras, between the observed
/// ray and the direction to the two-ray midpoint, in pixels via `focal_px`.
/// A midpoint at or behind either camera centre is an infinite residual.
#[derive(Clone, Copy, Debug)]
pub struct GeneralizedRelativePoseEstimator {
    pub focal_px: f64,
}

impl<T: Real> Estimator<RayCorrespondence<T>> for GeneralizedRelativePoseEstimator {
    type Model = Pose<T>;

    fn sample_size(&self) -> usize {
        17
    }

    fn fit(&self, sample: &[&RayCorrespondence<T>]) -> Option<Pose<T>> {
        let owned: Vec<_> = sample.iter().map(|c| **c).collect();
        solve_rel_pose_generalized(&owned).ok()
    }

    fn refit(&self, inliers: &[&RayCorrespondence<T>], previous: &Pose<T>) -> Option<Pose<T>> {
        let owned: Vec<_> = inliers.iter().map(|c| **c).collect();
        Some(polish(*previous, &owned, 50))
    }

    fn residual(&self, model: &Pose<T>, c: &RayCorrespondence<T>) -> f64 {
        let a_t_b = model.inverse();
        let db = a_t_b.rotation() * c.b.direction;
        let m = c.depth_margin();
        match c.depths(model) {
            Some((s, t, mid)) if s > m && t > m => {
                let cb = a_t_b.transform_point(&c.center_b);
                let ea = c.a.direction.angle(&(mid - c.center_a));
                let eb = db.angle(&(mid - cb));
                to_f64(ea.max(eb)) * self.focal_px
            }
            Some(_) => f64::INFINITY,
            // Parallel rays: a point at infinity, compare directions only.
            None => to_f64(c.a.direction.angle(&db)) * self.focal_px,
        }
    }
}
