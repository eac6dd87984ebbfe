//! Rigid transforms, pinhole projection and Plücker line algebra.
//!
//! Frames follow the `a_T_b` convention: a pose named `world_T_body` maps
//! body coordinates into world coordinates (`p_w = R p_b + t`).

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};

/// Points closer than this to a camera's image plane are treated as invisible.
pub const EPS_DEPTH: f64 = 1e-6;

/// Errors raised by the geometric primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
}

/// A rigid-body transform stored as a unit quaternion and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    rotation: UnitQuaternion<T>,
    translation: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a rotation matrix, projecting it onto SO(3) first.
    pub fn from_matrix(rotation: &Matrix3<T>, translation: Vector3<T>) -> Self {
        let rot = nearest_rotation(rotation);
        Self {
            rotation: UnitQuaternion::from_matrix(&rot),
            translation,
        }
    }

    /// Pure translation.
    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about the camera `y` axis (yaw for a `y`-down camera frame),
    /// followed by a translation.
    pub fn from_yaw(yaw: T, translation: Vector3<T>) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw),
            translation,
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<T> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Maps a point from the source frame into the destination frame.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Maps a point from the destination frame back into the source frame.
    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    /// Right perturbation `self * Exp(delta)` with `delta = [omega; v]`.
    pub fn retract(&self, delta: &Vector6<T>) -> Pose<T> {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let mut rotation = self.rotation * UnitQuaternion::from_scaled_axis(omega);
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.translation + self.rotation * v,
        }
    }

    /// Rotation angle of `self^-1 * other` in radians.
    pub fn angle_to(&self, other: &Pose<T>) -> T {
        self.rotation.angle_to(&other.rotation)
    }

    /// Converts to another scalar type.
    pub fn convert<U: Real>(&self) -> Pose<U> {
        let q = self.rotation.quaternion();
        let c = |x: T| lit::<U>(crate::scalar::to_f64(x));
        Pose {
            rotation: UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                c(q.w),
                c(q.i),
                c(q.j),
                c(q.k),
            )),
            translation: Vector3::new(
                c(self.translation.x),
                c(self.translation.y),
                c(self.translation.z),
            ),
        }
    }
}

/// Closest rotation matrix (Frobenius norm) via SVD.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * v_t
}

/// Cross-product matrix `[v]_x`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Pinhole intrinsics of one component camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    /// Validated constructor.
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Checks `fx, fy > 0` and that the principal point lies inside the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={:?}, fy={:?})",
                self.fx, self.fy
            )));
        }
        let w = lit::<T>(self.width as f64);
        let h = lit::<T>(self.height as f64);
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({:?}, {:?}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<T> {
        Matrix3::new(
            self.fx,
            T::zero(),
            self.cx,
            T::zero(),
            self.fy,
            self.cy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    pub fn inverse_matrix(&self) -> Result<Matrix3<T>, GeometryError> {
        self.check_invertible()?;
        let (fx, fy) = (self.fx, self.fy);
        Ok(Matrix3::new(
            T::one() / fx,
            T::zero(),
            -self.cx / fx,
            T::zero(),
            T::one() / fy,
            -self.cy / fy,
            T::zero(),
            T::zero(),
            T::one(),
        ))
    }

    fn check_invertible(&self) -> Result<(), GeometryError> {
        if self.fx == T::zero() || self.fy == T::zero() || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(
                "intrinsic matrix is not invertible".into(),
            ));
        }
        Ok(())
    }

    /// Normalized image coordinates `K^-1 [u, 1]`.
    pub fn unproject(&self, u: &Vector2<T>) -> Result<Vector3<T>, GeometryError> {
        self.check_invertible()?;
        Ok(Vector3::new(
            (u.x - self.cx) / self.fx,
            (u.y - self.cy) / self.fy,
            T::one(),
        ))
    }

    /// Projects a point given in this camera's frame.
    pub fn project(&self, p_cam: &Vector3<T>) -> Result<Vector2<T>, GeometryError> {
        if p_cam.z <= lit(EPS_DEPTH) {
            return Err(GeometryError::BehindCamera {
                depth: crate::scalar::to_f64(p_cam.z),
            });
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Whether a pixel lies inside `[0, width) x [0, height)`.
    pub fn contains(&self, u: &Vector2<T>) -> bool {
        u.x >= T::zero()
            && u.y >= T::zero()
            && u.x < lit(self.width as f64)
            && u.y < lit(self.height as f64)
    }
}

/// A 3D line in Plücker coordinates: unit direction and moment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PluckerRay<T: Real> {
    pub direction: Vector3<T>,
    pub moment: Vector3<T>,
}

impl<T: Real> PluckerRay<T> {
    /// Normalizes `(direction, moment)` jointly so the direction is unit length.
    pub fn new(direction: Vector3<T>, moment: Vector3<T>) -> Self {
        let n = direction.norm();
        Self {
            direction: direction / n,
            moment: moment / n,
        }
    }

    /// Line through `point` with the given direction.
    pub fn from_point_direction(point: &Vector3<T>, direction: &Vector3<T>) -> Self {
        let q = direction.normalize();
        Self {
            direction: q,
            moment: point.cross(&q),
        }
    }

    /// Point of the line closest to the origin.
    pub fn closest_point_to_origin(&self) -> Vector3<T> {
        self.direction.cross(&self.moment)
    }

    /// Expresses the line in another frame: `frame_T_self`.
    pub fn transform(&self, pose: &Pose<T>) -> Self {
        let q = pose.rotation() * self.direction;
        let m = pose.rotation() * self.moment + pose.translation().cross(&q);
        Self {
            direction: q,
            moment: m,
        }
    }

    /// Perpendicular distance from `p` to the line.
    pub fn distance_to(&self, p: &Vector3<T>) -> T {
        ray_point_residual(self, p).norm()
    }
}

/// Lifts a pixel of a component camera to a Plücker ray in the rig body frame.
pub fn pixel_to_plucker<T: Real>(
    u: &Vector2<T>,
    k: &Intrinsics<T>,
    body_t_cam: &Pose<T>,
) -> Result<PluckerRay<T>, GeometryError> {
    let u_hat = k.unproject(u)?;
    let q = (body_t_cam.rotation() * u_hat).normalize();
    let moment = body_t_cam.translation().cross(&q);
    Ok(PluckerRay {
        direction: q,
        moment,
    })
}

/// Projects a world point through `world_T_body * body_T_cam` and `K`.
pub fn project<T: Real>(
    point_world: &Vector3<T>,
    world_t_body: &Pose<T>,
    body_t_cam: &Pose<T>,
    k: &Intrinsics<T>,
) -> Result<Vector2<T>, GeometryError> {
    let world_t_cam = world_t_body.compose(body_t_cam);
    let p_cam = world_t_cam.inverse_transform_point(point_world);
    k.project(&p_cam)
}

/// Defect `(lambda q + q x q') - p` between a ray and a point, where `lambda`
/// places the foot of the perpendicular from `p` on the line.
pub fn ray_point_residual<T: Real>(ray: &PluckerRay<T>, point: &Vector3<T>) -> Vector3<T> {
    let lambda = ray.direction.dot(point);
    ray.direction * lambda + ray.closest_point_to_origin() - point
}

/// A map point together with its data association.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmark<T: Real> {
    pub id: u64,
    pub position: Vector3<T>,
    pub observations: Vec<Observation>,
}

/// One measurement of a landmark: (keyframe, component camera, keypoint).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe: u64,
    pub camera: usize,
    pub keypoint: usize,
}

impl<T: Real> Landmark<T> {
    pub fn new(id: u64, position: Vector3<T>) -> Self {
        Self {
            id,
            position,
            observations: Vec::new(),
        }
    }

    /// Appends an observation; returns `false` if it was already recorded.
    pub fn add_observation(&mut self, obs: Observation) -> bool {
        if self.observations.contains(&obs) {
            return false;
        }
        self.observations.push(obs);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_k() -> Intrinsics<f64> {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        }
    }

    #[test]
    fn identity_pixel_lifts_to_optical_axis() {
        let ray = pixel_to_plucker(&Vector2::new(0.0, 0.0), &unit_k(), &Pose::identity()).unwrap();
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.moment, Vector3::zeros());
    }

    #[test]
    fn offset_camera_has_moment() {
        let pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let ray = pixel_to_plucker(&Vector2::new(0.0, 0.0), &unit_k(), &pose).unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(ray.moment, Vector3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn principal_point_is_principal_ray() {
        let k = Intrinsics::new(663.0, 660.0, 359.5, 270.2, 720, 540).unwrap();
        let ray = pixel_to_plucker(&Vector2::new(k.cx, k.cy), &k, &Pose::identity()).unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.moment, Vector3::zeros());
    }

    #[test]
    fn zero_focal_length_is_rejected() {
        let mut k = unit_k();
        k.fx = 0.0;
        let err = pixel_to_plucker(&Vector2::new(0.0, 0.0), &k, &Pose::identity()).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidIntrinsics(_)));
        assert!(Intrinsics::new(1.0, 0.0, 0.0, 0.0, 1, 1).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 5.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn project_examples() {
        let p = Vector3::new(0.0, 0.0, 2.0);
        let id = Pose::identity();
        assert_eq!(project(&p, &id, &id, &unit_k()).unwrap(), Vector2::new(0.0, 0.0));

        let cam = Pose::from_translation(Vector3::new(0.165, 0.0, 0.0));
        let u = project(&p, &id, &cam, &unit_k()).unwrap();
        assert_relative_eq!(u, Vector2::new(-0.0825, 0.0), epsilon = 1e-15);

        let behind = project(&Vector3::new(0.0, 0.0, -1.0), &id, &id, &unit_k());
        assert!(matches!(behind, Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn ray_point_residual_examples() {
        let axis = PluckerRay::new(Vector3::z(), Vector3::zeros());
        assert_eq!(ray_point_residual(&axis, &Vector3::new(0.0, 0.0, 5.0)), Vector3::zeros());
        assert_relative_eq!(ray_point_residual(&axis, &Vector3::new(1.0, 0.0, 5.0)).norm(), 1.0);

        let shifted = PluckerRay::new(Vector3::z(), Vector3::new(0.0, -1.0, 0.0));
        assert_relative_eq!(shifted.closest_point_to_origin(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(ray_point_residual(&shifted, &Vector3::new(1.0, 0.0, 3.0)), Vector3::zeros());
    }

    #[test]
    fn duplicate_observation_is_rejected() {
        let mut l = Landmark::new(3, Vector3::new(0.0, 0.0, 1.0f64));
        let o = Observation {
            keyframe: 1,
            camera: 0,
            keypoint: 7,
        };
        assert!(l.add_observation(o));
        assert!(!l.add_observation(o));
        assert_eq!(l.observations.len(), 1);
    }

    #[test]
    fn works_in_single_precision() {
        let k = Intrinsics::new(500.0f32, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let cam = Pose::from_translation(Vector3::new(0.2f32, 0.0, 0.0));
        let p = Vector3::new(0.3f32, -0.1, 3.0);
        let u = project(&p, &Pose::identity(), &cam, &k).unwrap();
        let ray = pixel_to_plucker(&u, &k, &cam).unwrap();
        assert!(ray_point_residual(&ray, &p).norm() < 1e-5);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose<f64>> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(w, t)| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::from(w)),
                    Vector3::from(t),
                )
            })
    }

    proptest! {
        #[test]
        fn pose_is_orthonormal(p in pose_strategy()) {
            let r = p.rotation_matrix();
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pose_group_laws(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation_matrix() - right.rotation_matrix()).abs().max() < 1e-9);
            prop_assert!((left.translation() - right.translation()).abs().max() < 1e-9);
            for id in [a.compose(&a.inverse()), a.inverse().compose(&a)] {
                prop_assert!((id.rotation_matrix() - Matrix3::identity()).abs().max() < 1e-9);
                prop_assert!(id.translation().abs().max() < 1e-9);
            }
        }

        #[test]
        fn plucker_round_trip(
            world_t_body in pose_strategy(),
            body_t_cam in pose_strategy(),
            fx in 200.0f64..900.0,
            fy in 200.0f64..900.0,
            p_cam in (prop::array::uniform2(-2.0f64..2.0), 0.3f64..20.0),
        ) {
            let k = Intrinsics::new(fx, fy, 320.0, 240.0, 640, 480).unwrap();
            let world_t_cam = world_t_body.compose(&body_t_cam);
            let p_c = Vector3::new(p_cam.0[0], p_cam.0[1], p_cam.1);
            let p_w = world_t_cam.transform_point(&p_c);
            let u = project(&p_w, &world_t_body, &body_t_cam, &k).unwrap();
            let ray = pixel_to_plucker(&u, &k, &body_t_cam).unwrap();
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            prop_assert!(ray.direction.dot(&ray.moment).abs() < 1e-9);
            let p_b = world_t_body.inverse_transform_point(&p_w);
            prop_assert!(ray_point_residual(&ray, &p_b).norm() < 1e-9);
        }

        #[test]
        fn mono_rays_have_zero_moment(u in prop::array::uniform2(0.0f64..640.0)) {
            let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
            let ray = pixel_to_plucker(&Vector2::from(u), &k, &Pose::identity()).unwrap();
            prop_assert_eq!(ray.moment, Vector3::zeros());
        }
    }
}
