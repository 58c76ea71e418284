//! Virtual camera paths used by the loopback tests and the benchmark.

use fvv_core::geometry::VIRTUAL_CAMERA_ID;
use fvv_core::{CameraModel, Rig};

/// Virtual camera at fraction `s` of the way along the rig, moving through
/// the cameras in calibration order. Between two neighbours the center is lerped and
/// the rotation slerped. `s` is clamped to [0, 1].
pub fn arc_camera(rig: &Rig, s: f64) -> CameraModel {
    let cams = rig.cameras();
    let first = cams.first().expect("rig has cameras");
    if cams.len() == 1 {
        return CameraModel { id: VIRTUAL_CAMERA_ID, ..*first };
    }
    let f = s.clamp(0.0, 1.0) * (cams.len() - 1) as f64;
    let i = (f.floor() as usize).min(cams.len() - 2);
    let a = &cams[i];
    let b = &cams[i + 1];
    CameraModel { id: VIRTUAL_CAMERA_ID, intrinsics: a.intrinsics, pose: a.pose.interpolate(&b.pose, f - i as f64) }
}
