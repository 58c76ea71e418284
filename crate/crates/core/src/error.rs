use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::CameraId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper rotation (orthonormality error {orthonormality_error:.3e}, det {determinant})")]
    InvalidRotation { orthonormality_error: f64, determinant: f64 },
    #[error("translation has non-finite entries")]
    InvalidTranslation,
    #[error("look-at target coincides with the eye or is parallel to up")]
    DegenerateLookAt,
    #[error("unproject requires positive depth, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid depth range: need 0 < z_near < z_far, got z_near={z_near} z_far={z_far}")]
    InvalidDepthRange { z_near: f64, z_far: f64 },
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration is not valid JSON: {0}")]
    Syntax(String),
    #[error("calibration field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("camera {id}: {reason}")]
    Camera { id: CameraId, reason: String },
    #[error("camera entry #{index} has no usable `id`: {reason}")]
    MissingId { index: usize, reason: String },
    #[error("duplicate camera id {0}")]
    DuplicateId(CameraId),
    #[error("calibration lists no cameras")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("dimensions {width}x{height} are not even and non-zero")]
    OddDimensions { width: u32, height: u32 },
    #[error("depth code {code:#x} at ({x}, {y}) exceeds 12 bits")]
    CodeOutOfRange { x: u32, y: u32, code: u16 },
    #[error("{plane} plane has {actual} bytes, expected {expected}")]
    PlaneSize { plane: &'static str, expected: usize, actual: usize },
    #[error("buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed {format} header: {reason}")]
    Header { format: &'static str, reason: String },
}
