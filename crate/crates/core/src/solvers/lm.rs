use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};

use crate::geometry::Pose;
use crate::scalar::{lit, Real};

/// Left perturbation `R' = exp(w) R`, `t' = t + v` with `delta = (w, v)`.
pub(crate) fn apply_left<T: Real>(pose: &Pose<T>, delta: &Vector6<T>) -> Pose<T> {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(
        UnitQuaternion::from_scaled_axis(w) * pose.rotation(),
        pose.translation() + v,
    )
}

pub(crate) struct LmOutcome<T: Real> {
    pub pose: Pose<T>,
    pub cost: T,
    /// Cost after every accepted step, starting with the initial cost.
    pub history: Vec<T>,
    pub iterations: usize,
}

/// Levenberg-Marquardt over a 6-dof pose.
///
/// `normal` returns `(cost, J^T J, J^T r)` at a pose and `cost` the cost
/// alone; `update` applies a step. Stops after `max_iter` iterations or when
/// an accepted step changes the cost by less than `rel_tol` relative.
pub(crate) fn lm_pose<T, U, N, C>(
    init: Pose<T>,
    max_iter: usize,
    rel_tol: T,
    update: U,
    mut normal: N,
    mut cost: C,
) -> LmOutcome<T>
where
    T: Real,
    U: Fn(&Pose<T>, &Vector6<T>) -> Pose<T>,
    N: FnMut(&Pose<T>) -> (T, Matrix6<T>, Vector6<T>),
    C: FnMut(&Pose<T>) -> T,
{
    let mut pose = init;
    let (mut c, mut h, mut g) = normal(&pose);
    let mut history = vec![c];
    let mut lambda: T = lit(1e-4);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        if c <= T::zero() || !c.is_finite() {
            break;
        }
        let max_diag = (0..6).map(|i| h[(i, i)]).fold(T::zero(), |a, b| a.max(b));
        if max_diag <= T::zero() {
            break;
        }
        let floor = max_diag * lit(1e-12);
        let mut accepted = false;
        while lambda < lit(1e16) {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(floor);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= lit(10.0);
                continue;
            };
            let step = -chol.solve(&g);
            let cand = update(&pose, &step);
            let c_new = cost(&cand);
            if c_new.is_finite() && c_new < c {
                let rel = (c - c_new) / c;
                pose = cand;
                lambda = (lambda * lit(0.1)).max(lit(1e-12));
                accepted = true;
                let (_, nh, ng) = normal(&pose);
                c = c_new;
                h = nh;
                g = ng;
                history.push(c);
                if rel < rel_tol {
                    return LmOutcome {
                        pose,
                        cost: c,
                        history,
                        iterations,
                    };
                }
                break;
            }
            lambda *= lit(10.0);
        }
        if !accepted {
            break;
        }
    }
    LmOutcome {
        pose,
        cost: c,
        history,
        iterations,
    }
}
