//! Core of a live free-viewpoint video pipeline: camera geometry, lossless
//! 12-bit depth packing into 4:2:0 frames, software frame synchronization,
//! reference-camera selection, layered depth-image-based view synthesis and
//! the wire formats that connect capture nodes, the edge server and viewers.

pub mod calibration;
pub mod dataset;
pub mod depth_codec;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod scene_sim;
pub mod selection;
pub mod sync;
pub mod synthesis;
pub mod transport;

pub use calibration::Rig;
pub use depth_codec::{pack_depth, unpack_depth, DepthMap, PackedDepthFrame};
pub use frame::{I420Frame, Mask};
pub use geometry::{CameraId, CameraIntrinsics, CameraModel, CameraPose, DepthQuantizer};
pub use sync::{FrameSet, Timestamp};
