//! Rig calibration: intrinsics and `body_T_cam` extrinsics of every camera.
//!
//! The on-disk format is a JSON document:
//!
//! ```json
//! {
//!   "rig_format": 1,
//!   "body_camera_index": 0,
//!   "cameras": [
//!     { "id": "cam0", "fx": 663.0, "fy": 663.0, "cx": 360.0, "cy": 270.0,
//!       "width": 720, "height": 540,
//!       "q_wxyz": [1.0, 0.0, 0.0, 0.0], "t_xyz": [0.0, 0.0, 0.0] }
//!   ]
//! }
//! ```
//!
//! `q_wxyz`/`t_xyz` describe `body_T_cam`, i.e. they map camera coordinates
//! into the rig body frame. `body_camera_index` is optional.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose};

pub const RIG_FORMAT_VERSION: u32 = 1;

const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse rig file: {0}")]
    Parse(String),
    #[error("unsupported rig_format {0} (expected {RIG_FORMAT_VERSION})")]
    UnsupportedFormat(u32),
    #[error("rig has no cameras")]
    Empty,
    #[error("duplicate camera id {0:?}")]
    DuplicateCameraId(String),
    #[error("camera {id:?}: {source}")]
    InvalidIntrinsics {
        id: String,
        #[source]
        source: GeometryError,
    },
    #[error("body camera index {index} out of range for {count} cameras")]
    BadBodyCamera { index: usize, count: usize },
}

/// One component camera of the rig.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalibration {
    pub id: String,
    pub intrinsics: Intrinsics<f64>,
    pub body_t_cam: Pose<f64>,
}

/// A calibrated multi-camera rig whose body frame coincides with one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCalibration {
    cameras: Vec<CameraCalibration>,
    body_camera_index: usize,
}

impl RigCalibration {
    /// Validates the cameras and re-expresses extrinsics so that the body
    /// camera has identity extrinsics.
    ///
    /// With `body_camera = None` the first camera with identity extrinsics is
    /// used, falling back to camera 0.
    pub fn new(
        cameras: Vec<CameraCalibration>,
        body_camera: Option<usize>,
    ) -> Result<Self, CalibrationError> {
        if cameras.is_empty() {
            return Err(CalibrationError::Empty);
        }
        let mut ids = BTreeSet::new();
        for cam in &cameras {
            if !ids.insert(cam.id.as_str()) {
                return Err(CalibrationError::DuplicateCameraId(cam.id.clone()));
            }
            cam.intrinsics
                .validate()
                .map_err(|source| CalibrationError::InvalidIntrinsics {
                    id: cam.id.clone(),
                    source,
                })?;
        }
        let index = match body_camera {
            Some(i) if i >= cameras.len() => {
                return Err(CalibrationError::BadBodyCamera {
                    index: i,
                    count: cameras.len(),
                })
            }
            Some(i) => i,
            None => cameras
                .iter()
                .position(|c| is_identity(&c.body_t_cam))
                .unwrap_or(0),
        };
        let mut rig = Self {
            cameras,
            body_camera_index: index,
        };
        rig.rebase(index);
        Ok(rig)
    }

    fn rebase(&mut self, index: usize) {
        let reference = self.cameras[index].body_t_cam;
        if reference == Pose::identity() {
            return;
        }
        let ref_inv = reference.inverse();
        for (i, cam) in self.cameras.iter_mut().enumerate() {
            cam.body_t_cam = if i == index {
                Pose::identity()
            } else {
                ref_inv.compose(&cam.body_t_cam)
            };
        }
    }

    pub fn cameras(&self) -> &[CameraCalibration] {
        &self.cameras
    }

    pub fn camera(&self, i: usize) -> &CameraCalibration {
        &self.cameras[i]
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn body_camera_index(&self) -> usize {
        self.body_camera_index
    }

    /// `cam_j_T_cam_i`: maps camera `i` coordinates into camera `j`.
    pub fn relative_pose(&self, i: usize, j: usize) -> Pose<f64> {
        self.cameras[j]
            .body_t_cam
            .inverse()
            .compose(&self.cameras[i].body_t_cam)
    }

    /// Copy of the rig with new extrinsics; the body camera stays at identity.
    pub fn with_extrinsics(&self, extrinsics: &[Pose<f64>]) -> Self {
        let mut rig = self.clone();
        for (cam, pose) in rig.cameras.iter_mut().zip(extrinsics) {
            cam.body_t_cam = *pose;
        }
        rig.cameras[rig.body_camera_index].body_t_cam = Pose::identity();
        rig
    }

    pub fn to_json_string(&self) -> String {
        let file = RigFile {
            rig_format: RIG_FORMAT_VERSION,
            body_camera_index: Some(self.body_camera_index),
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let q = c.body_t_cam.rotation().quaternion();
                    let t = c.body_t_cam.translation();
                    CameraEntry {
                        id: c.id.clone(),
                        fx: c.intrinsics.fx,
                        fy: c.intrinsics.fy,
                        cx: c.intrinsics.cx,
                        cy: c.intrinsics.cy,
                        width: c.intrinsics.width,
                        height: c.intrinsics.height,
                        q_wxyz: [q.w, q.i, q.j, q.k],
                        t_xyz: [t.x, t.y, t.z],
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("rig serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, CalibrationError> {
        let file: RigFile =
            serde_json::from_str(s).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        if file.rig_format != RIG_FORMAT_VERSION {
            return Err(CalibrationError::UnsupportedFormat(file.rig_format));
        }
        let cameras = file
            .cameras
            .into_iter()
            .map(|e| {
                let [w, x, y, z] = e.q_wxyz;
                if !(w * w + x * x + y * y + z * z > 0.0) {
                    return Err(CalibrationError::Parse(format!(
                        "camera {:?}: zero quaternion",
                        e.id
                    )));
                }
                let rotation = UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z));
                Ok(CameraCalibration {
                    id: e.id,
                    intrinsics: Intrinsics {
                        fx: e.fx,
                        fy: e.fy,
                        cx: e.cx,
                        cy: e.cy,
                        width: e.width,
                        height: e.height,
                    },
                    body_t_cam: Pose::new(rotation, Vector3::from(e.t_xyz)),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(cameras, file.body_camera_index)
    }
}

fn is_identity(p: &Pose<f64>) -> bool {
    p.angle_to(&Pose::identity()) < IDENTITY_TOL && p.translation().norm() < IDENTITY_TOL
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    rig_format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_camera_index: Option<usize>,
    cameras: Vec<CameraEntry>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    id: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    q_wxyz: [f64; 4],
    t_xyz: [f64; 3],
}

/// Reads a rig calibration file.
pub fn load_rig(path: impl AsRef<Path>) -> Result<RigCalibration, CalibrationError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RigCalibration::from_json_str(&text)
}

/// Writes a rig calibration file.
pub fn save_rig(rig: &RigCalibration, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
    let path = path.as_ref();
    std::fs::write(path, rig.to_json_string()).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })
}
