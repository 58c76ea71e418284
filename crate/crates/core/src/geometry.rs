//! Pinhole cameras, rigid poses and the 12-bit depth quantizer.
//!
//! Pixel convention: row-major, origin at the top-left, and pixel `(i, j)`
//! has its center at the continuous coordinate `(u, v) = (i, j)`. Camera
//! space is x right, y down, z forward.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type CameraId = u16;

/// Camera id reserved for the synthesized (virtual) view on the wire.
pub const VIRTUAL_CAMERA_ID: CameraId = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 2 || self.height < 2 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be even and at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same camera at a different resolution, scaling focal lengths and the
    /// principal point.
    pub fn scaled(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.fx, self.fy, self.cx, self.cy, self.width as f64, self.height as f64]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self, GeometryError> {
        let (w, h) = (a[4], a[5]);
        if w.fract() != 0.0 || h.fract() != 0.0 || w < 0.0 || h < 0.0 || w > u32::MAX as f64 || h > u32::MAX as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!("non-integral image size {w}x{h}")));
        }
        Self::new(a[0], a[1], a[2], a[3], w as u32, h as u32)
    }
}

/// Rigid world-to-camera transform: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let ortho_err = gram.abs().max();
        let det = rotation.determinant();
        if !ortho_err.is_finite() || ortho_err > ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::InvalidRotation { orthonormality_error: ortho_err, determinant: det });
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidTranslation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose of a camera at `eye` looking at `target`, with `up` giving the
    /// world direction that should appear upwards in the image.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::DegenerateLookAt);
        }
        let z = forward.normalize();
        // Image y points down, so camera x = z × up keeps x to the right.
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(GeometryError::DegenerateLookAt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation)
    }

    /// Pose from camera center and camera-to-world rotation.
    pub fn from_center(center: Point3<f64>, cam_to_world: Matrix3<f64>) -> Result<Self, GeometryError> {
        let rotation = cam_to_world.transpose();
        Self::new(rotation, -(rotation * center.coords))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse_transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Unit optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn as_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)], t.x, t.y, t.z]
    }

    pub fn from_array(a: [f64; 12]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(&a[..9]), Vector3::new(a[9], a[10], a[11]))
    }

    /// Interpolates camera centers linearly and rotations by slerp.
    pub fn interpolate(&self, other: &CameraPose, s: f64) -> CameraPose {
        let ra = Rotation3::from_matrix_unchecked(self.rotation.transpose());
        let rb = Rotation3::from_matrix_unchecked(other.rotation.transpose());
        let r = ra.slerp(&rb, s);
        let c = self.center().coords.lerp(&other.center().coords, s);
        let rotation = r.matrix().transpose();
        CameraPose { rotation, translation: -(rotation * c) }
    }

    /// Rotation of this pose about a world axis through a world point,
    /// convenient for building test rigs.
    pub fn rotated_about(&self, axis: Unit<Vector3<f64>>, angle: f64, pivot: Point3<f64>) -> CameraPose {
        let rot = Rotation3::from_axis_angle(&axis, angle);
        let c = pivot + rot * (self.center() - pivot);
        let cam_to_world = rot.matrix() * self.rotation.transpose();
        let rotation = cam_to_world.transpose();
        CameraPose { rotation, translation: -(rotation * c.coords) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub id: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// Result of projecting a world point: continuous pixel coordinates and the
/// camera-space depth, which may be non-positive behind the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.z > 0.0
    }

    /// Nearest pixel, if it lies inside a `width`×`height` image.
    pub fn pixel(&self, width: u32, height: u32) -> Option<(u32, u32)> {
        if !self.in_front() {
            return None;
        }
        let x = self.u.round();
        let y = self.v.round();
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            return None;
        }
        Some((x as u32, y as u32))
    }
}

impl CameraModel {
    pub fn new(id: CameraId, intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { id, intrinsics, pose }
    }

    pub fn project(&self, point: &Point3<f64>) -> Projection {
        project(point, self)
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<Point3<f64>, GeometryError> {
        unproject(u, v, z, self)
    }

    pub fn center(&self) -> Point3<f64> {
        self.pose.center()
    }

    /// World-space direction of the ray through `(u, v)`, scaled so that its
    /// camera-space z component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.pose.rotation().transpose() * d_cam
    }
}

pub fn project(point: &Point3<f64>, cam: &CameraModel) -> Projection {
    let p = cam.pose.transform_point(point);
    let k = &cam.intrinsics;
    Projection { u: k.fx * p.x / p.z + k.cx, v: k.fy * p.y / p.z + k.cy, z: p.z }
}

pub fn unproject(u: f64, v: f64, z: f64, cam: &CameraModel) -> Result<Point3<f64>, GeometryError> {
    if !z.is_finite() || z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    let k = &cam.intrinsics;
    let p_cam = Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
    Ok(cam.pose.inverse_transform_point(&p_cam))
}

/// Number of representable depth levels (12 bits).
pub const DEPTH_LEVELS: u32 = 4096;
/// Largest valid depth code.
pub const MAX_DEPTH_CODE: u16 = 4095;
/// Depth code reserved for "no depth" (holes, invalid pixels).
pub const INVALID_DEPTH_CODE: u16 = 0;

/// Maps camera-space depth to 12-bit codes, linear in inverse depth.
///
/// `z_near` maps to 4095 and `z_far` to 1. Code 0 marks invalid depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthQuantizer {
    z_near: f64,
    z_far: f64,
}

impl DepthQuantizer {
    pub fn new(z_near: f64, z_far: f64) -> Result<Self, GeometryError> {
        if !(z_near > 0.0 && z_far > z_near && z_far.is_finite()) {
            return Err(GeometryError::InvalidDepthRange { z_near, z_far });
        }
        Ok(Self { z_near, z_far })
    }

    pub fn z_near(&self) -> f64 {
        self.z_near
    }

    pub fn z_far(&self) -> f64 {
        self.z_far
    }

    fn disparity_span(&self) -> f64 {
        1.0 / self.z_near - 1.0 / self.z_far
    }

    pub fn quantize(&self, z: f64) -> u16 {
        if !(z >= self.z_near && z <= self.z_far) {
            return INVALID_DEPTH_CODE;
        }
        let scaled = f64::from(MAX_DEPTH_CODE) * (1.0 / z - 1.0 / self.z_far) / self.disparity_span();
        (scaled.round() as i64).clamp(1, i64::from(MAX_DEPTH_CODE)) as u16
    }

    /// Depth in meters for a code, `None` for the invalid code. Codes above
    /// 4095 are clamped.
    pub fn dequantize(&self, code: u16) -> Option<f64> {
        if code == INVALID_DEPTH_CODE {
            return None;
        }
        let code = code.min(MAX_DEPTH_CODE);
        let disparity = 1.0 / self.z_far + f64::from(code) / f64::from(MAX_DEPTH_CODE) * self.disparity_span();
        Some(1.0 / disparity)
    }

    /// Depth interval covered by one code step at depth `z`.
    pub fn step_at(&self, z: f64) -> f64 {
        z * z * self.disparity_span() / f64::from(MAX_DEPTH_CODE)
    }
}

pub fn quantize_depth(z: f64, q: &DepthQuantizer) -> u16 {
    q.quantize(z)
}

pub fn dequantize_depth(code: u16, q: &DepthQuantizer) -> Option<f64> {
    q.dequantize(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn simple_cam() -> CameraModel {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        CameraModel::new(0, k, CameraPose::identity())
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let p = project(&Point3::new(0.0, 0.0, 2.0), &simple_cam());
        assert_eq!((p.u, p.v, p.z), (50.0, 50.0, 2.0));
        let p = project(&Point3::new(1.0, 0.0, 2.0), &simple_cam());
        assert_eq!((p.u, p.v, p.z), (100.0, 50.0, 2.0));
    }

    #[test]
    fn unproject_inverts_examples() {
        let cam = simple_cam();
        assert_eq!(unproject(50.0, 50.0, 2.0, &cam).unwrap(), Point3::new(0.0, 0.0, 2.0));
        assert_eq!(unproject(100.0, 50.0, 2.0, &cam).unwrap(), Point3::new(1.0, 0.0, 2.0));
    }

    #[test]
    fn unproject_rejects_non_positive_depth() {
        let cam = simple_cam();
        assert!(matches!(unproject(1.0, 1.0, 0.0, &cam), Err(GeometryError::NonPositiveDepth(_))));
        assert!(unproject(1.0, 1.0, -3.0, &cam).is_err());
        assert!(unproject(1.0, 1.0, f64::NAN, &cam).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 0).is_err());
        assert!(CameraIntrinsics::new(0.0, 100.0, 50.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 100.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 2, 2).is_ok());
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let mirror = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(mirror, Vector3::zeros()).is_err());
        let scaled = Matrix3::identity() * 1.001;
        assert!(CameraPose::new(scaled, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_faces_target() {
        let pose = CameraPose::look_at(Point3::new(0.0, 1.0, -4.0), Point3::new(0.0, 1.0, 0.0), Vector3::y()).unwrap();
        assert_relative_eq!(pose.optical_axis(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(pose.center(), Point3::new(0.0, 1.0, -4.0), epsilon = 1e-12);
        // World up shows up as negative image y.
        let above = pose.transform_point(&Point3::new(0.0, 2.0, 0.0));
        assert!(above.y < 0.0);
        // Facing +z with y up, world -x is on the right.
        let right = pose.transform_point(&Point3::new(-1.0, 1.0, 0.0));
        assert!(right.x > 0.0);
    }

    #[test]
    fn quantizer_endpoints() {
        let q = DepthQuantizer::new(0.5, 20.0).unwrap();
        assert_eq!(q.quantize(0.5), 4095);
        assert_eq!(q.quantize(20.0), 1);
        assert_eq!(q.quantize(0.49), 0);
        assert_eq!(q.quantize(20.01), 0);
        assert_eq!(q.quantize(f64::NAN), 0);
        assert_eq!(q.dequantize(0), None);
        assert!(DepthQuantizer::new(2.0, 1.0).is_err());
        assert!(DepthQuantizer::new(0.0, 1.0).is_err());
    }

    #[test]
    fn quantizer_round_trips_every_code() {
        for q in [DepthQuantizer::new(0.5, 20.0).unwrap(), DepthQuantizer::new(0.3, 4.0).unwrap()] {
            for code in 1..=MAX_DEPTH_CODE {
                let z = q.dequantize(code).unwrap();
                assert_eq!(q.quantize(z), code, "code {code}");
            }
        }
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -std::f64::consts::PI..std::f64::consts::PI,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                let axis = Vector3::from(axis);
                (axis.norm() > 1e-3).then(|| {
                    let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
                    CameraPose::new(*r.matrix(), Vector3::from(t)).unwrap()
                })
            })
    }

    proptest! {
        #[test]
        fn pose_inverse_composes_to_identity(pose in arb_pose()) {
            let id = pose.compose(&pose.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
        }

        #[test]
        fn quantizer_is_monotone(a in 0.5f64..20.0, b in 0.5f64..20.0) {
            let q = DepthQuantizer::new(0.5, 20.0).unwrap();
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(q.quantize(near) >= q.quantize(far));
        }

        #[test]
        fn project_unproject_round_trip(pose in arb_pose(), u in 0.0f64..640.0, v in 0.0f64..360.0, z in 0.1f64..50.0) {
            let k = CameraIntrinsics::new(500.0, 510.0, 320.0, 180.0, 640, 360).unwrap();
            let cam = CameraModel::new(1, k, pose);
            let p = cam.unproject(u, v, z).unwrap();
            let back = cam.project(&p);
            prop_assert!((back.u - u).abs() < 1e-9 * u.abs().max(1.0));
            prop_assert!((back.v - v).abs() < 1e-9 * v.abs().max(1.0));
            prop_assert!((back.z - z).abs() < 1e-9 * z);
        }
    }
}
