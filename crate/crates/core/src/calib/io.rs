//! Calibration file format.
//!
//! A rig is stored as one JSON document:
//!
//! ```json
//! {
//!   "cameras": [
//!     {
//!       "name": "top",
//!       "rotation_format": "matrix",
//!       "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1],
//!       "translation": [0, 0, 2.5],
//!       "intrinsics": { "fx": 800, "fy": 800, "cx": 640, "cy": 512 },
//!       "distortion": { "k1": -0.1, "k2": 0.01, "p1": 0.0, "p2": 0.0 }
//!     }
//!   ]
//! }
//! ```
//!
//! `rotation` holds 9 row-major numbers for `"matrix"` (the default) or a
//! 3-number axis-angle vector for `"rodrigues"`. Unknown fields are rejected,
//! in particular higher-order distortion terms such as `k3`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{rodrigues, CameraModel, Distortion, Intrinsics, Rig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationFormat {
    #[default]
    Matrix,
    Rodrigues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionEntry {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub name: String,
    #[serde(default)]
    pub rotation_format: RotationFormat,
    pub rotation: Vec<f64>,
    pub translation: [f64; 3],
    pub intrinsics: IntrinsicsEntry,
    pub distortion: DistortionEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraEntry>,
}

impl CameraEntry {
    pub fn to_camera(&self) -> Result<CameraModel<f64>> {
        let rotation = match (self.rotation_format, self.rotation.len()) {
            (RotationFormat::Matrix, 9) => Matrix3::from_row_slice(&self.rotation),
            (RotationFormat::Rodrigues, 3) => {
                rodrigues(Vector3::new(self.rotation[0], self.rotation[1], self.rotation[2]))
            }
            (fmt, n) => {
                return Err(Error::Config(format!(
                    "camera {:?}: {n} rotation values do not match format {fmt:?}",
                    self.name
                )))
            }
        };
        let k = &self.intrinsics;
        let d = &self.distortion;
        CameraModel::new(
            self.name.clone(),
            rotation,
            Vector3::from(self.translation),
            Intrinsics { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy },
            Distortion { k1: d.k1, k2: d.k2, p1: d.p1, p2: d.p2 },
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_camera(cam: &CameraModel<f64>) -> Self {
        let r = cam.rotation();
        let k = cam.intrinsics();
        let d = cam.distortion();
        CameraEntry {
            name: cam.name().to_string(),
            rotation_format: RotationFormat::Matrix,
            rotation: (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect(),
            translation: [cam.translation().x, cam.translation().y, cam.translation().z],
            intrinsics: IntrinsicsEntry { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy },
            distortion: DistortionEntry { k1: d.k1, k2: d.k2, p1: d.p1, p2: d.p2 },
        }
    }
}

pub fn parse_rig(text: &str) -> Result<Rig<f64>> {
    let file: CalibrationFile =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("calibration: {e}")))?;
    let cams = file.cameras.iter().map(CameraEntry::to_camera).collect::<Result<Vec<_>>>()?;
    Rig::new(cams).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_rig(path: &Path) -> Result<Rig<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rig(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn rig_to_json(rig: &Rig<f64>) -> String {
    let file = CalibrationFile { cameras: rig.cameras().iter().map(CameraEntry::from_camera).collect() };
    serde_json::to_string_pretty(&file).expect("calibration serializes")
}

pub fn write_rig(rig: &Rig<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, rig_to_json(rig)).map_err(|e| Error::io(path, e))
}
