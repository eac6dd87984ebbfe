//! Multi-camera visual SLAM with a generalized (Plücker ray) camera model.

pub mod backend;
pub mod calibration;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod overlap;
pub mod pipeline;
pub mod scalar;
pub mod sim;
pub mod solvers;

pub use geometry::{Intrinsics, Landmark, Observation, PluckerRay, Pose};
pub use scalar::Real;

pub type Pose64 = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type PluckerRay64 = PluckerRay<f64>;
pub type PluckerRay32 = PluckerRay<f32>;
pub type Intrinsics64 = Intrinsics<f64>;
