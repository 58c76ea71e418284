//! Rig calibration: per-camera intrinsics and poses plus the shared depth
//! quantizer, stored as JSON.
//!
//! ```json
//! {
//!   "depth": { "z_near": 0.5, "z_far": 20.0 },
//!   "cameras": [
//!     {
//!       "id": 0,
//!       "intrinsics": { "fx": 554.3, "fy": 554.3, "cx": 320.0, "cy": 180.0, "width": 640, "height": 360 },
//!       "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1],
//!       "translation": [0, 0, 0]
//!     }
//!   ]
//! }
//! ```
//!
//! `rotation` is the row-major world-to-camera rotation and `translation` the
//! world-to-camera translation in meters.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CalibrationError;
use crate::geometry::{CameraId, CameraIntrinsics, CameraModel, CameraPose, DepthQuantizer};

pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    cameras: Vec<CameraModel>,
    quantizer: DepthQuantizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    id: CameraId,
    intrinsics: CameraIntrinsics,
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize)]
struct CalibrationDoc<'a> {
    depth: &'a DepthQuantizer,
    cameras: Vec<CameraEntry>,
}

impl Rig {
    pub fn new(cameras: Vec<CameraModel>, quantizer: DepthQuantizer) -> Result<Self, CalibrationError> {
        if cameras.is_empty() {
            return Err(CalibrationError::Empty);
        }
        let mut seen = BTreeSet::new();
        for cam in &cameras {
            if !seen.insert(cam.id) {
                return Err(CalibrationError::DuplicateId(cam.id));
            }
        }
        Ok(Self { cameras, quantizer })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, id: CameraId) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<CameraId> {
        self.cameras.iter().map(|c| c.id).collect()
    }

    pub fn quantizer(&self) -> &DepthQuantizer {
        &self.quantizer
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn to_json(&self) -> String {
        let doc = CalibrationDoc {
            depth: &self.quantizer,
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let p = c.pose.as_array();
                    CameraEntry {
                        id: c.id,
                        intrinsics: c.intrinsics,
                        rotation: p[..9].try_into().unwrap(),
                        translation: p[9..].try_into().unwrap(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let root: Value = serde_json::from_str(text).map_err(|e| CalibrationError::Syntax(e.to_string()))?;
        let obj = root
            .as_object()
            .ok_or_else(|| CalibrationError::Field { field: "(root)".into(), reason: "expected an object".into() })?;
        if let Some(key) = obj.keys().find(|k| *k != "depth" && *k != "cameras") {
            return Err(CalibrationError::Field { field: key.clone(), reason: "unknown field".into() });
        }
        let depth = obj
            .get("depth")
            .ok_or_else(|| CalibrationError::Field { field: "depth".into(), reason: "missing".into() })?;
        let quantizer: DepthQuantizer = serde_json::from_value(depth.clone())
            .map_err(|e| CalibrationError::Field { field: "depth".into(), reason: e.to_string() })?;
        let quantizer = DepthQuantizer::new(quantizer.z_near(), quantizer.z_far())
            .map_err(|e| CalibrationError::Field { field: "depth".into(), reason: e.to_string() })?;
        let entries = obj
            .get("cameras")
            .and_then(Value::as_array)
            .ok_or_else(|| CalibrationError::Field { field: "cameras".into(), reason: "missing or not a list".into() })?;

        let mut cameras = Vec::with_capacity(entries.len());
        for (index, entry) in entries.iter().enumerate() {
            let id = entry
                .get("id")
                .ok_or_else(|| CalibrationError::MissingId { index, reason: "missing".into() })
                .and_then(|v| {
                    serde_json::from_value::<CameraId>(v.clone())
                        .map_err(|e| CalibrationError::MissingId { index, reason: e.to_string() })
                })?;
            let camera_err = |reason: String| CalibrationError::Camera { id, reason };
            let parsed: CameraEntry = serde_json::from_value(entry.clone()).map_err(|e| camera_err(e.to_string()))?;
            parsed.intrinsics.validate().map_err(|e| camera_err(e.to_string()))?;
            let pose = CameraPose::new(Matrix3::from_row_slice(&parsed.rotation), Vector3::from(parsed.translation))
                .map_err(|e| camera_err(e.to_string()))?;
            cameras.push(CameraModel::new(id, parsed.intrinsics, pose));
        }
        Self::new(cameras, quantizer)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CalibrationError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json()).map_err(|source| CalibrationError::Io { path: path.to_path_buf(), source })
    }
}
