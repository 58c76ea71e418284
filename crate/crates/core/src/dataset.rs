//! File-based capture sequences.
//!
//! ```text
//! <root>/calibration.json
//! <root>/cam<i>/color_<tick>.i420   FVVC dump, I420 color
//! <root>/cam<i>/depth_<tick>.fvvd   FVVD dump, packed full depth
//! <root>/cam<i>/mask_<tick>.pbm     P4 foreground mask
//! <root>/background/                optional saved background model
//! ```
//!
//! Ticks are zero-padded to six digits. Every camera must hold the same set
//! of ticks. Frames are read lazily.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::calibration::{Rig, CALIBRATION_FILE};
use crate::depth_codec::{pack_depth, read_depth_dump, unpack_depth, write_depth_dump, DepthMap};
use crate::error::{CalibrationError, CodecError};
use crate::frame::{read_color_dump, write_color_dump, I420Frame, Mask};
use crate::geometry::CameraId;
use crate::scene_sim::{render, RenderedView, Scene};
use crate::sync::{Timestamp, DEFAULT_PERIOD_US};
use crate::synthesis::{build_background_model, BackgroundModel, BackgroundSource, SynthesisError};

pub const BACKGROUND_DIR: &str = "background";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}: no calibration file")]
    NoCalibration(PathBuf),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("camera {camera}: folder {path} is missing")]
    MissingCamera { camera: CameraId, path: PathBuf },
    #[error("camera {camera}, tick {tick}: missing {path}")]
    MissingFile { camera: CameraId, tick: u32, path: PathBuf },
    #[error("camera {camera}, tick {tick}: {reason}")]
    Dimensions { camera: CameraId, tick: u32, reason: String },
    #[error("camera {camera}, tick {tick}: {source}")]
    Codec { camera: CameraId, tick: u32, source: CodecError },
    #[error("camera {camera} has no frames")]
    NoFrames { camera: CameraId },
    #[error("camera {camera} has no tick {tick}")]
    NoSuchFrame { camera: CameraId, tick: u32 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Background(#[from] SynthesisError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub fn camera_dir(root: &Path, camera: CameraId) -> PathBuf {
    root.join(format!("cam{camera}"))
}

fn color_path(root: &Path, camera: CameraId, tick: u32) -> PathBuf {
    camera_dir(root, camera).join(format!("color_{tick:06}.i420"))
}

fn depth_path(root: &Path, camera: CameraId, tick: u32) -> PathBuf {
    camera_dir(root, camera).join(format!("depth_{tick:06}.fvvd"))
}

fn mask_path(root: &Path, camera: CameraId, tick: u32) -> PathBuf {
    camera_dir(root, camera).join(format!("mask_{tick:06}.pbm"))
}

/// Ticks present in a camera folder, taken from its color files.
fn list_ticks(dir: &Path) -> Result<BTreeSet<u32>, DatasetError> {
    let mut ticks = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        let name = name.to_string_lossy();
        if let Some(t) = name.strip_prefix("color_").and_then(|n| n.strip_suffix(".i420")) {
            if let Ok(t) = t.parse() {
                ticks.insert(t);
            }
        }
    }
    Ok(ticks)
}

/// One camera's stored capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredFrame {
    pub color: I420Frame,
    pub depth: DepthMap,
    pub mask: Mask,
}

impl From<RenderedView> for StoredFrame {
    fn from(v: RenderedView) -> Self {
        Self { color: v.color, depth: v.depth, mask: v.fg_mask }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    rig: Rig,
    ticks: Vec<u32>,
}

/// Opens a dataset and checks its layout. Frame contents are validated as
/// they are read.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let calib = root.join(CALIBRATION_FILE);
    if !calib.is_file() {
        return Err(DatasetError::NoCalibration(root.to_path_buf()));
    }
    let rig = Rig::load(&calib)?;
    let mut ticks: Option<BTreeSet<u32>> = None;
    for cam in rig.cameras() {
        let dir = camera_dir(root, cam.id);
        if !dir.is_dir() {
            return Err(DatasetError::MissingCamera { camera: cam.id, path: dir });
        }
        let found = list_ticks(&dir)?;
        if found.is_empty() {
            return Err(DatasetError::NoFrames { camera: cam.id });
        }
        let expected = ticks.get_or_insert_with(|| found.clone());
        for tick in expected.iter() {
            for path in [color_path(root, cam.id, *tick), depth_path(root, cam.id, *tick), mask_path(root, cam.id, *tick)] {
                if !path.is_file() {
                    return Err(DatasetError::MissingFile { camera: cam.id, tick: *tick, path });
                }
            }
        }
        if let Some(extra) = found.difference(expected).next() {
            let camera = rig.cameras()[0].id;
            return Err(DatasetError::MissingFile { camera, tick: *extra, path: color_path(root, camera, *extra) });
        }
    }
    Ok(Dataset { root: root.to_path_buf(), rig, ticks: ticks.unwrap_or_default().into_iter().collect() })
}

impl Dataset {
    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ticks(&self) -> &[u32] {
        &self.ticks
    }

    /// Capture time assigned to a tick.
    pub fn timestamp(&self, tick: u32) -> Timestamp {
        Timestamp(u64::from(tick) * DEFAULT_PERIOD_US)
    }

    pub fn frame(&self, camera: CameraId, tick: u32) -> Result<StoredFrame, DatasetError> {
        let cam = self.rig.camera(camera).ok_or(DatasetError::NoSuchFrame { camera, tick })?;
        if self.ticks.binary_search(&tick).is_err() {
            return Err(DatasetError::NoSuchFrame { camera, tick });
        }
        let read = |path: PathBuf| {
            std::fs::read(&path).map_err(|source| match source.kind() {
                std::io::ErrorKind::NotFound => DatasetError::MissingFile { camera, tick, path: path.clone() },
                _ => DatasetError::Io { path: path.clone(), source },
            })
        };
        let codec = |source| DatasetError::Codec { camera, tick, source };
        let (_, color) = read_color_dump(&read(color_path(&self.root, camera, tick))?).map_err(codec)?;
        let (_, packed) = read_depth_dump(&read(depth_path(&self.root, camera, tick))?).map_err(codec)?;
        let mask = Mask::read_pbm(read(mask_path(&self.root, camera, tick))?.as_slice()).map_err(codec)?;

        let want = (cam.intrinsics.width, cam.intrinsics.height);
        for (what, got) in [
            ("color", (color.width(), color.height())),
            ("depth", (packed.width(), packed.height())),
            ("mask", (mask.width(), mask.height())),
        ] {
            if got != want {
                return Err(DatasetError::Dimensions {
                    camera,
                    tick,
                    reason: format!("{what} is {}x{}, calibration says {}x{}", got.0, got.1, want.0, want.1),
                });
            }
        }
        Ok(StoredFrame { color, depth: unpack_depth(&packed), mask })
    }

    /// Loads `background/` if present.
    pub fn background(&self) -> Result<Option<BackgroundModel>, DatasetError> {
        let dir = self.root.join(BACKGROUND_DIR);
        if !dir.is_dir() {
            return Ok(None);
        }
        Ok(Some(build_background_model(&self.rig, BackgroundSource::Directory(&dir))?))
    }
}

/// Writes one camera frame into the dataset layout.
pub fn write_frame(root: &Path, camera: CameraId, tick: u32, frame: &StoredFrame) -> Result<(), DatasetError> {
    let dir = camera_dir(root, camera);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let codec = |source| DatasetError::Codec { camera, tick, source };
    let write = |path: PathBuf, bytes: Vec<u8>| std::fs::write(&path, bytes).map_err(io_err(&path));
    write(color_path(root, camera, tick), write_color_dump(&frame.color, tick).map_err(codec)?)?;
    write(depth_path(root, camera, tick), write_depth_dump(&pack_depth(&frame.depth), tick).map_err(codec)?)?;
    let mut pbm = Vec::new();
    frame.mask.write_pbm(&mut pbm).expect("writing to memory");
    write(mask_path(root, camera, tick), pbm)
}

/// Renders `ticks` frames of `scene` from every rig camera, plus the
/// background model, into `root`.
pub fn render_dataset(scene: &Scene, rig: &Rig, ticks: u32, period_us: u64, root: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    rig.save(&root.join(CALIBRATION_FILE))?;
    for tick in 0..ticks {
        let t = Timestamp(u64::from(tick) * period_us);
        rig.cameras().par_iter().try_for_each(|cam| {
            let view = render(scene, cam, t, rig.quantizer());
            write_frame(root, cam.id, tick, &view.into())
        })?;
    }
    let model = build_background_model(rig, BackgroundSource::Oracle(scene))?;
    model.save(&root.join(BACKGROUND_DIR), rig)?;
    Ok(())
}
