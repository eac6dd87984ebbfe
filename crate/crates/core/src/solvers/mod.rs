//! Linear and iterative geometric solvers over Plücker rays.
//!
//! * [`solve_rel_pose_generalized`]: linear 17-point solver for the
//!   generalized epipolar constraint, metric translation included.
//! * [`solve_rel_pose_mono`]: normalized 8-point solver for a single pinhole.
//! * [`solve_gpnp`]: absolute pose of a generalized camera by Levenberg-Marquardt.
//! * [`triangulate`]: least-squares intersection of several rays.
//! * [`ransac`]: deterministic hypothesize-and-verify over any [`Estimator`].

mod generalized;
mod lm;
mod gpnp;
mod mono;
mod ransac;
mod triangulation;

pub use generalized::{
    classical_epipolar_residual, generalized_epipolar_residual, solve_rel_pose_generalized, translation_direction, translation_scale_spread,
    GeneralizedRelativePoseEstimator, RayCorrespondence,
};
pub use gpnp::{solve_gpnp, GpnpEstimator, GpnpOptions, GpnpSolution, RayPointMatch};
pub use mono::{
    essential_matrix, solve_rel_pose_mono, solve_rel_pose_mono_with, MonoRelativePoseEstimator,
    PixelCorrespondence, DEFAULT_MIN_PARALLAX_DEG,
};
pub use ransac::{ransac, Estimator, RansacConfig, RansacResult};
pub use triangulation::{
    sum_squared_line_distances, triangulate, triangulate_from_centers, two_ray_depths,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("parallax below threshold ({parallax_deg:.4} deg)")]
    LowParallax { parallax_deg: f64 },
    #[error("triangulated point lies behind a camera")]
    Cheirality,
    #[error("no consensus model found")]
    NoConsensus,
    #[error("pose unreliable: rms residual {rms}")]
    PoseUnreliable { rms: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
}
