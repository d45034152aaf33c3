//! Camera models, projection with lens distortion, undistortion and
//! median-of-pairs triangulation.

mod camera;
pub mod io;
mod triangulate;

pub use camera::{
    rodrigues, CameraModel, Distortion, Intrinsics, DEPTH_EPSILON, UNDISTORT_MAX_ITER, UNDISTORT_TOL,
};
pub use io::{load_rig, parse_rig, rig_to_json, write_rig};
pub use nalgebra::{Point2, Point3};
pub use triangulate::{triangulate_median, triangulate_pair, PairTriangulation};
pub(crate) use triangulate::median_in_place;

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An ordered set of at least two uniquely named cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig<T: Scalar> {
    cameras: Vec<CameraModel<T>>,
}

impl<T: Scalar> Rig<T> {
    pub fn new(cameras: Vec<CameraModel<T>>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(Error::InvalidModel(format!("a rig needs at least 2 cameras, got {}", cameras.len())));
        }
        let mut seen = HashSet::new();
        for cam in &cameras {
            if !seen.insert(cam.name()) {
                return Err(Error::InvalidModel(format!("duplicate camera name {:?}", cam.name())));
            }
        }
        Ok(Rig { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[CameraModel<T>] {
        &self.cameras
    }

    pub fn camera(&self, i: usize) -> &CameraModel<T> {
        &self.cameras[i]
    }

    pub fn names(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name() == name)
    }

    /// Rig with cameras reordered to match `names`.
    pub fn reordered(&self, names: &[String]) -> Result<Self> {
        let cams = names
            .iter()
            .map(|n| {
                self.position(n)
                    .map(|i| self.cameras[i].clone())
                    .ok_or_else(|| Error::Config(format!("view {n:?} has no camera in the calibration")))
            })
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cams)
    }

    /// Same rig with every camera's distortion replaced.
    pub fn with_distortion(&self, distortion: Distortion<T>) -> Result<Self> {
        Rig::new(self.cameras.iter().map(|c| c.with_distortion(distortion)).collect::<Result<_>>()?)
    }
}

/// Camera at `eye` looking at `target`, with world +Z as the up direction.
pub fn look_at_camera<T: Scalar>(
    name: impl Into<String>,
    eye: Point3<T>,
    target: Point3<T>,
    intrinsics: Intrinsics<T>,
    distortion: Distortion<T>,
) -> Result<CameraModel<T>> {
    let forward = (target - eye)
        .try_normalize(T::default_epsilon())
        .ok_or_else(|| Error::InvalidModel("camera eye coincides with its target".into()))?;
    let mut up = Vector3::z();
    if forward.cross(&up).norm() < crate::scalar::lit(1e-6) {
        up = Vector3::y();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye.coords);
    CameraModel::new(name, rotation, translation, intrinsics, distortion)
}
