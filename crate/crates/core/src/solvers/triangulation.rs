use nalgebra::{Matrix3, Vector3};

use super::SolverError;
use crate::geometry::PluckerRay;
use crate::scalar::{to_f64, Real};

/// Least-squares intersection of rays: the point minimizing the sum of
/// squared perpendicular distances to every line.
///
/// Each ray is treated as a half-line starting at its point closest to the
/// frame origin; use [`triangulate_from_centers`] when camera centers are
/// known.
pub fn triangulate<T: Real>(rays: &[PluckerRay<T>], min_parallax: T) -> Result<Vector3<T>, SolverError> {
    let origins: Vec<_> = rays.iter().map(|r| r.closest_point_to_origin()).collect();
    triangulate_from_centers(rays, &origins, min_parallax)
}

/// As [`triangulate`], with cheirality checked against the given ray origins.
pub fn triangulate_from_centers<T: Real>(
    rays: &[PluckerRay<T>],
    centers: &[Vector3<T>],
    min_parallax: T,
) -> Result<Vector3<T>, SolverError> {
    if rays.len() < 2 {
        return Err(SolverError::InsufficientData {
            needed: 2,
            got: rays.len(),
        });
    }
    let parallax = max_pairwise_angle(rays);
    if parallax < min_parallax {
        return Err(SolverError::LowParallax {
            parallax_deg: to_f64(parallax).to_degrees(),
        });
    }
    let mut a = Matrix3::<T>::zeros();
    let mut b = Vector3::<T>::zeros();
    for ray in rays {
        let proj = Matrix3::identity() - ray.direction * ray.direction.transpose();
        a += proj;
        b += proj * ray.closest_point_to_origin();
    }
    let x = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| SolverError::Numerical("singular triangulation system".into()))?;
    for (ray, c) in rays.iter().zip(centers) {
        if ray.direction.dot(&(x - c)) <= T::zero() {
            return Err(SolverError::Cheirality);
        }
    }
    Ok(x)
}

/// Sum of squared distances from `x` to every line.
pub fn sum_squared_line_distances<T: Real>(rays: &[PluckerRay<T>], x: &Vector3<T>) -> T {
    rays.iter()
        .map(|r| crate::geometry::ray_point_residual(r, x).norm_squared())
        .fold(T::zero(), |a, b| a + b)
}

/// Signed depths along two rays (from their closest-to-origin points) of the
/// mutually closest points. `None` for (near) parallel rays.
pub fn two_ray_depths<T: Real>(a: &PluckerRay<T>, b: &PluckerRay<T>) -> Option<(T, T, Vector3<T>)> {
    let pa = a.closest_point_to_origin();
    let pb = b.closest_point_to_origin();
    let d = a.direction.dot(&b.direction);
    let denom = T::one() - d * d;
    if denom < crate::scalar::lit(1e-14) {
        return None;
    }
    let w = pa - pb;
    let e = a.direction.dot(&w);
    let f = b.direction.dot(&w);
    let s = (d * f - e) / denom;
    let t = (f - d * e) / denom;
    let mid = (pa + a.direction * s + pb + b.direction * t) * crate::scalar::lit::<T>(0.5);
    Some((s, t, mid))
}

fn max_pairwise_angle<T: Real>(rays: &[PluckerRay<T>]) -> T {
    let mut best = T::zero();
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            let c = a.direction.dot(&b.direction).clamp(-T::one(), T::one());
            let angle = a.direction.cross(&b.direction).norm().atan2(c);
            if angle > best {
                best = angle;
            }
        }
    }
    best
}
