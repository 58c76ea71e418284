//! Layered depth-image-based view synthesis.
//!
//! The three active references are forward-warped twice: once with the
//! offline background depth (non-foreground pixels only) and once with the
//! transmitted foreground depth (foreground pixels only). Each layer is
//! blended across references, the foreground is painted over the
//! background, and remaining disocclusions are filled from the farther side
//! of each hole run.
//!
//! Colors stay in I420: luma is warped per pixel, chroma per 2×2 cell with
//! its own z-buffer.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{Rig, CALIBRATION_FILE};
use crate::depth_codec::{pack_depth, read_depth_dump, unpack_depth, write_depth_dump, DepthMap};
use crate::error::{CalibrationError, CodecError};
use crate::frame::{I420Frame, Mask};
use crate::geometry::{CameraId, CameraModel, DepthQuantizer, INVALID_DEPTH_CODE};
use crate::scene_sim::{render, Scene};
use crate::selection::ViewState;
use crate::sync::{FrameSet, TimedFrame, Timestamp};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("frame set has no frame for active camera {0}")]
    MissingCamera(CameraId),
    #[error("camera {0} is not in the rig calibration")]
    UnknownCamera(CameraId),
    #[error("no background model for camera {0}")]
    MissingBackground(CameraId),
    #[error("camera {camera}: {reason}")]
    Dimensions { camera: CameraId, reason: String },
    #[error("background model for camera {camera} is invalid: {reason}")]
    InvalidBackground { camera: CameraId, reason: String },
    #[error("view has no active cameras")]
    NoActiveCameras,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Codec { path: String, source: CodecError },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    /// Each source pixel writes its nearest destination pixel only.
    Nearest,
    /// Also writes the rest of the 2×2 block around the projected point,
    /// at lower priority than any nearest-pixel write.
    #[default]
    Square2x2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Contributions farther than the nearest one by more than this many
    /// meters are treated as occluded in that reference.
    pub epsilon: f64,
    pub splat: SplatMode,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, splat: SplatMode::default() }
    }
}

/// Which source pixels take part in a warp.
#[derive(Debug, Clone, Copy)]
pub enum PixelFilter<'a> {
    All,
    Inside(&'a Mask),
    Outside(&'a Mask),
}

impl PixelFilter<'_> {
    fn keeps(&self, idx: usize) -> bool {
        match self {
            PixelFilter::All => true,
            PixelFilter::Inside(m) => m.bits()[idx],
            PixelFilter::Outside(m) => !m.bits()[idx],
        }
    }
}

/// A reference view reprojected into the virtual camera. Depths are
/// camera-space meters in the virtual camera; invalid pixels hold infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedView {
    pub color: I420Frame,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub chroma_depth: Vec<f64>,
    pub chroma_valid: Vec<bool>,
    pub source_camera: CameraId,
}

impl WarpedView {
    pub fn empty(width: u32, height: u32, source_camera: CameraId) -> Self {
        let n = width as usize * height as usize;
        Self {
            color: I420Frame::black(width, height).expect("warp targets have even dimensions"),
            depth: vec![f64::INFINITY; n],
            valid: vec![false; n],
            chroma_depth: vec![f64::INFINITY; n / 4],
            chroma_valid: vec![false; n / 4],
            source_camera,
        }
    }

    pub fn width(&self) -> u32 {
        self.color.width()
    }

    pub fn height(&self) -> u32 {
        self.color.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Two-tier z-buffer: nearest-pixel writes always beat neighborhood writes.
struct ZBuffer {
    depth: Vec<f64>,
    tier: Vec<u8>,
    value: Vec<u8>,
    aux: Vec<u8>,
}

const TIER_EMPTY: u8 = 0;
const TIER_NEIGHBOR: u8 = 1;
const TIER_NEAREST: u8 = 2;

impl ZBuffer {
    fn new(n: usize) -> Self {
        Self { depth: vec![f64::INFINITY; n], tier: vec![TIER_EMPTY; n], value: vec![0; n], aux: vec![0; n] }
    }

    #[inline]
    fn write(&mut self, idx: usize, z: f64, tier: u8, value: u8, aux: u8) {
        let cur = self.tier[idx];
        if tier > cur || (tier == cur && z < self.depth[idx]) {
            self.depth[idx] = z;
            self.tier[idx] = tier;
            self.value[idx] = value;
            self.aux[idx] = aux;
        }
    }
}

/// Reprojects every selected source pixel into `dst_cam` and splats it with
/// a z-buffer (nearer wins). Destination pixels nothing lands on stay invalid.
#[allow(clippy::too_many_arguments)]
pub fn forward_warp(
    src_color: &I420Frame,
    src_depth: &DepthMap,
    quantizer: &DepthQuantizer,
    src_cam: &CameraModel,
    dst_cam: &CameraModel,
    filter: PixelFilter<'_>,
    splat: SplatMode,
) -> WarpedView {
    let (sw, sh) = (src_cam.intrinsics.width as usize, src_cam.intrinsics.height as usize);
    debug_assert_eq!((src_color.width() as usize, src_color.height() as usize), (sw, sh));
    debug_assert_eq!((src_depth.width() as usize, src_depth.height() as usize), (sw, sh));
    let (dw, dh) = (dst_cam.intrinsics.width as usize, dst_cam.intrinsics.height as usize);

    // p_dst = M * p_src + b for camera-space points.
    let rs = src_cam.pose.rotation();
    let rd = dst_cam.pose.rotation();
    let m: Matrix3<f64> = rd * rs.transpose();
    let b: Vector3<f64> = dst_cam.pose.translation() - m * src_cam.pose.translation();
    let ks = &src_cam.intrinsics;
    let kd = &dst_cam.intrinsics;

    // Dequantization table: one division per code instead of per pixel.
    let lut: Vec<f64> = (0..4096u16).map(|c| quantizer.dequantize(c).unwrap_or(0.0)).collect();

    let mut luma = ZBuffer::new(dw * dh);
    let mut chroma = ZBuffer::new(dw * dh / 4);
    let (scw, dcw) = (sw / 2, dw / 2);
    let codes = src_depth.codes();

    for row in 0..sh {
        let ny = (row as f64 - ks.cy) / ks.fy;
        for col in 0..sw {
            let idx = row * sw + col;
            let code = codes[idx];
            if code == INVALID_DEPTH_CODE || !filter.keeps(idx) {
                continue;
            }
            let z = lut[code as usize];
            let p = Vector3::new((col as f64 - ks.cx) / ks.fx * z, ny * z, z);
            let q = m * p + b;
            if q.z <= 0.0 {
                continue;
            }
            let u = kd.fx * q.x / q.z + kd.cx;
            let v = kd.fy * q.y / q.z + kd.cy;
            let y_val = src_color.y[idx];
            let c_idx = (row / 2) * scw + col / 2;
            let (u_val, v_val) = (src_color.u[c_idx], src_color.v[c_idx]);

            let mut put = |x: isize, y: isize, tier: u8| {
                if x < 0 || y < 0 || x as usize >= dw || y as usize >= dh {
                    return;
                }
                let (x, y) = (x as usize, y as usize);
                luma.write(y * dw + x, q.z, tier, y_val, 0);
                chroma.write((y / 2) * dcw + x / 2, q.z, tier, u_val, v_val);
            };
            let (nx, ny_) = (u.round() as isize, v.round() as isize);
            put(nx, ny_, TIER_NEAREST);
            if splat == SplatMode::Square2x2 {
                let (x0, y0) = (u.floor() as isize, v.floor() as isize);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (x, y) = (x0 + dx, y0 + dy);
                    if (x, y) != (nx, ny_) {
                        put(x, y, TIER_NEIGHBOR);
                    }
                }
            }
        }
    }

    let mut out = WarpedView::empty(kd.width, kd.height, src_cam.id);
    for i in 0..dw * dh {
        if luma.tier[i] != TIER_EMPTY {
            out.valid[i] = true;
            out.depth[i] = luma.depth[i];
            out.color.y[i] = luma.value[i];
        }
    }
    for i in 0..dw * dh / 4 {
        if chroma.tier[i] != TIER_EMPTY {
            out.chroma_valid[i] = true;
            out.chroma_depth[i] = chroma.depth[i];
            out.color.u[i] = chroma.value[i];
            out.color.v[i] = chroma.aux[i];
        }
    }
    out
}

/// Normalized blend weights `1/(d + 0.01)` for reference distances.
pub fn blend_weights(distances: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / (d + 0.01)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Weighted mix of warped references at one sample position. Returns
/// `(depth, first, second)` or `None` when nothing valid lands there.
#[inline]
fn mix_sample(
    contribs: impl Iterator<Item = (bool, f64, u8, u8, f64)> + Clone,
    epsilon: f64,
) -> Option<(f64, u8, u8)> {
    let zmin = contribs.clone().filter(|c| c.0).map(|c| c.1).fold(f64::INFINITY, f64::min);
    if !zmin.is_finite() {
        return None;
    }
    let (mut wsum, mut z, mut a, mut b) = (0.0, 0.0, 0.0, 0.0);
    for (valid, depth, x, y, w) in contribs {
        if valid && depth <= zmin + epsilon {
            wsum += w;
            z += w * depth;
            a += w * f64::from(x);
            b += w * f64::from(y);
        }
    }
    Some((z / wsum, (a / wsum).round().clamp(0.0, 255.0) as u8, (b / wsum).round().clamp(0.0, 255.0) as u8))
}

/// Mixes warped references. Per pixel, contributions farther than the
/// nearest valid one by more than `epsilon` are dropped and the rest are
/// averaged with weights `1/(d_i + 0.01)` renormalized over the survivors.
///
/// # Panics
///
/// Panics if `warps` is empty, if `distances` has a different length, or if
/// the warps differ in size.
pub fn blend(warps: &[WarpedView], distances: &[f64], epsilon: f64) -> WarpedView {
    assert!(!warps.is_empty(), "blend needs at least one view");
    assert_eq!(warps.len(), distances.len(), "one distance per warped view");
    let (w, h) = (warps[0].width(), warps[0].height());
    assert!(warps.iter().all(|v| v.width() == w && v.height() == h), "warped views differ in size");
    let weights = blend_weights(distances);
    let mut out = WarpedView::empty(w, h, warps[0].source_camera);

    for i in 0..(w * h) as usize {
        let contribs = warps.iter().zip(&weights).map(|(v, wt)| (v.valid[i], v.depth[i], v.color.y[i], 0u8, *wt));
        if let Some((z, y, _)) = mix_sample(contribs, epsilon) {
            out.valid[i] = true;
            out.depth[i] = z;
            out.color.y[i] = y;
        }
    }
    for i in 0..(w * h / 4) as usize {
        let contribs = warps
            .iter()
            .zip(&weights)
            .map(|(v, wt)| (v.chroma_valid[i], v.chroma_depth[i], v.color.u[i], v.color.v[i], *wt));
        if let Some((z, u, v)) = mix_sample(contribs, epsilon) {
            out.chroma_valid[i] = true;
            out.chroma_depth[i] = z;
            out.color.u[i] = u;
            out.color.v[i] = v;
        }
    }
    out
}

/// Fills invalid runs along each row from the neighbor with the farther
/// depth. Rows with no valid sample copy the nearest filled row; an image
/// with nothing valid stays at its current values.
fn fill_holes_plane(plane: &mut [u8], second: Option<&mut [u8]>, valid: &[bool], depth: &[f64], width: usize) {
    let height = plane.len() / width;
    let mut second = second;
    let mut row_filled = vec![false; height];
    for (row, filled) in row_filled.iter_mut().enumerate() {
        let base = row * width;
        let vrow = &valid[base..base + width];
        if !vrow.iter().any(|v| *v) {
            continue;
        }
        *filled = true;
        let mut x = 0;
        while x < width {
            if vrow[x] {
                x += 1;
                continue;
            }
            let start = x;
            while x < width && !vrow[x] {
                x += 1;
            }
            let left = start.checked_sub(1);
            let right = (x < width).then_some(x);
            let src = match (left, right) {
                (Some(l), Some(r)) => {
                    if depth[base + r] > depth[base + l] {
                        r
                    } else {
                        l
                    }
                }
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (None, None) => unreachable!("row has a valid sample"),
            };
            let val = plane[base + src];
            plane[base + start..base + x].fill(val);
            if let Some(s) = second.as_deref_mut() {
                let val = s[base + src];
                s[base + start..base + x].fill(val);
            }
        }
    }
    if row_filled.iter().all(|f| !*f) {
        return;
    }
    for row in 0..height {
        if row_filled[row] {
            continue;
        }
        let nearest = (1..height)
            .flat_map(|d| [row.checked_sub(d), Some(row + d).filter(|r| *r < height)])
            .flatten()
            .find(|r| row_filled[*r])
            .expect("some row is filled");
        plane.copy_within(nearest * width..(nearest + 1) * width, row * width);
        if let Some(s) = second.as_deref_mut() {
            s.copy_within(nearest * width..(nearest + 1) * width, row * width);
        }
    }
}

/// Hole-fills a view in place, returning the final frame.
pub fn fill_holes(view: &WarpedView) -> I420Frame {
    let mut frame = view.color.clone();
    let w = frame.width() as usize;
    fill_holes_plane(&mut frame.y, None, &view.valid, &view.depth, w);
    let cw = frame.chroma_width() as usize;
    let (u, v) = (&mut frame.u, &mut frame.v);
    fill_holes_plane(u, Some(v), &view.chroma_valid, &view.chroma_depth, cw);
    frame
}

/// Paints the foreground layer over the background layer (no depth test).
pub fn composite(background: &WarpedView, foreground: &WarpedView) -> WarpedView {
    let mut out = background.clone();
    for i in 0..out.valid.len() {
        if foreground.valid[i] {
            out.valid[i] = true;
            out.depth[i] = foreground.depth[i];
            out.color.y[i] = foreground.color.y[i];
        }
    }
    for i in 0..out.chroma_valid.len() {
        if foreground.chroma_valid[i] {
            out.chroma_valid[i] = true;
            out.chroma_depth[i] = foreground.chroma_depth[i];
            out.color.u[i] = foreground.color.u[i];
            out.color.v[i] = foreground.color.v[i];
        }
    }
    out
}

/// Static per-camera depth of the empty stage, built offline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundModel {
    maps: BTreeMap<CameraId, DepthMap>,
}

impl BackgroundModel {
    pub fn new(maps: BTreeMap<CameraId, DepthMap>) -> Result<Self, SynthesisError> {
        for (camera, map) in &maps {
            if let Some(i) = map.codes().iter().position(|c| *c == INVALID_DEPTH_CODE) {
                return Err(SynthesisError::InvalidBackground {
                    camera: *camera,
                    reason: format!("pixel ({}, {}) has no depth", i % map.width() as usize, i / map.width() as usize),
                });
            }
        }
        Ok(Self { maps })
    }

    pub fn get(&self, camera: CameraId) -> Result<&DepthMap, SynthesisError> {
        self.maps.get(&camera).ok_or(SynthesisError::MissingBackground(camera))
    }

    pub fn cameras(&self) -> Vec<CameraId> {
        self.maps.keys().copied().collect()
    }

    /// Checks that every rig camera has a model of the right size.
    pub fn check_rig(&self, rig: &Rig) -> Result<(), SynthesisError> {
        for cam in rig.cameras() {
            let map = self.get(cam.id)?;
            if (map.width(), map.height()) != (cam.intrinsics.width, cam.intrinsics.height) {
                return Err(SynthesisError::Dimensions {
                    camera: cam.id,
                    reason: format!(
                        "background is {}x{}, camera is {}x{}",
                        map.width(),
                        map.height(),
                        cam.intrinsics.width,
                        cam.intrinsics.height
                    ),
                });
            }
        }
        Ok(())
    }

    /// Writes `calibration.json` plus one `cam<id>.fvvd` dump per camera.
    pub fn save(&self, dir: &Path, rig: &Rig) -> Result<(), SynthesisError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthesisError::Io { path: dir.display().to_string(), source })?;
        rig.save(&dir.join(CALIBRATION_FILE))?;
        for (camera, map) in &self.maps {
            let path = dir.join(format!("cam{camera}.fvvd"));
            let bytes = write_depth_dump(&pack_depth(map), 0)
                .map_err(|source| SynthesisError::Codec { path: path.display().to_string(), source })?;
            std::fs::write(&path, bytes).map_err(|source| SynthesisError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Rig), SynthesisError> {
        let rig = Rig::load(&dir.join(CALIBRATION_FILE))?;
        let mut maps = BTreeMap::new();
        for cam in rig.cameras() {
            let path = dir.join(format!("cam{}.fvvd", cam.id));
            let bytes = std::fs::read(&path).map_err(|source| SynthesisError::Io { path: path.display().to_string(), source })?;
            let (_, packed) =
                read_depth_dump(&bytes).map_err(|source| SynthesisError::Codec { path: path.display().to_string(), source })?;
            maps.insert(cam.id, unpack_depth(&packed));
        }
        let model = Self::new(maps)?;
        model.check_rig(&rig)?;
        Ok((model, rig))
    }
}

pub enum BackgroundSource<'a> {
    /// Render the scene without its foreground objects.
    Oracle(&'a Scene),
    /// Load a saved model directory.
    Directory(&'a Path),
}

pub fn build_background_model(rig: &Rig, source: BackgroundSource<'_>) -> Result<BackgroundModel, SynthesisError> {
    match source {
        BackgroundSource::Oracle(scene) => {
            let empty = scene.background_only();
            let maps = rig
                .cameras()
                .par_iter()
                .map(|cam| (cam.id, render(&empty, cam, Timestamp(0), rig.quantizer()).depth))
                .collect();
            BackgroundModel::new(maps)
        }
        BackgroundSource::Directory(dir) => {
            let (model, _) = BackgroundModel::load(dir)?;
            model.check_rig(rig)?;
            Ok(model)
        }
    }
}

/// Per-pixel union of transmitted foreground depth and the background model.
pub fn full_depth(frame: &TimedFrame, background: &BackgroundModel) -> Result<DepthMap, SynthesisError> {
    let bg = background.get(frame.camera_id)?;
    let mask = &frame.foreground_mask;
    if (mask.width(), mask.height()) != (bg.width(), bg.height()) {
        return Err(SynthesisError::Dimensions {
            camera: frame.camera_id,
            reason: format!("mask is {}x{}, background is {}x{}", mask.width(), mask.height(), bg.width(), bg.height()),
        });
    }
    let fg = unpack_depth(&frame.foreground_depth);
    let codes = mask.bits().iter().zip(fg.codes().iter().zip(bg.codes())).map(|(m, (f, b))| if *m { *f } else { *b }).collect();
    Ok(DepthMap::new(bg.width(), bg.height(), codes).expect("same dimensions as the background"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFrame {
    pub background: WarpedView,
    pub foreground: WarpedView,
    /// Composite before hole filling.
    pub composite: WarpedView,
    pub final_frame: I420Frame,
}

impl LayeredFrame {
    pub fn prefill_valid_fraction(&self) -> f64 {
        self.composite.valid_count() as f64 / self.composite.valid.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTimings {
    pub warp: Duration,
    pub blend: Duration,
    pub composite: Duration,
}

/// Synthesizes the virtual view of `view` from the active cameras in `set`.
pub fn synthesize(
    set: &FrameSet<TimedFrame>,
    view: &ViewState,
    background: &BackgroundModel,
    rig: &Rig,
    config: &SynthesisConfig,
) -> Result<LayeredFrame, SynthesisError> {
    synthesize_timed(set, view, background, rig, config).map(|(f, _)| f)
}

pub fn synthesize_timed(
    set: &FrameSet<TimedFrame>,
    view: &ViewState,
    background: &BackgroundModel,
    rig: &Rig,
    config: &SynthesisConfig,
) -> Result<(LayeredFrame, SynthesisTimings), SynthesisError> {
    let refs: Vec<(CameraId, f64, &TimedFrame)> = view
        .active
        .iter()
        .zip(&view.active_distances)
        .map(|(id, d)| set.frames.get(id).map(|e| (*id, *d, &e.frame)).ok_or(SynthesisError::MissingCamera(*id)))
        .collect::<Result<_, _>>()?;
    synthesize_refs(&view.virtual_camera, &refs, background, rig, config)
}

/// Synthesizes from explicit `(camera, distance, frame)` references.
pub fn synthesize_refs(
    virtual_cam: &CameraModel,
    references: &[(CameraId, f64, &TimedFrame)],
    background: &BackgroundModel,
    rig: &Rig,
    config: &SynthesisConfig,
) -> Result<(LayeredFrame, SynthesisTimings), SynthesisError> {
    if references.is_empty() {
        return Err(SynthesisError::NoActiveCameras);
    }
    let mut refs = Vec::with_capacity(references.len());
    for (id, _, frame) in references {
        let cam = rig.camera(*id).ok_or(SynthesisError::UnknownCamera(*id))?;
        frame.check_dimensions(&cam.intrinsics).map_err(|reason| SynthesisError::Dimensions { camera: *id, reason })?;
        let bg = background.get(*id)?;
        if (bg.width(), bg.height()) != (cam.intrinsics.width, cam.intrinsics.height) {
            return Err(SynthesisError::Dimensions { camera: *id, reason: "background model size differs from camera".into() });
        }
        refs.push((cam, *frame, bg));
    }
    let quantizer = rig.quantizer();

    let started = Instant::now();
    // Background and foreground warps of every reference, in parallel.
    let jobs: Vec<(usize, bool)> = (0..refs.len()).flat_map(|i| [(i, false), (i, true)]).collect();
    let warped: Vec<WarpedView> = jobs
        .par_iter()
        .map(|&(i, foreground)| {
            let (cam, frame, bg) = refs[i];
            if foreground {
                let depth = unpack_depth(&frame.foreground_depth);
                forward_warp(&frame.color, &depth, quantizer, cam, virtual_cam, PixelFilter::Inside(&frame.foreground_mask), config.splat)
            } else {
                forward_warp(&frame.color, bg, quantizer, cam, virtual_cam, PixelFilter::Outside(&frame.foreground_mask), config.splat)
            }
        })
        .collect();
    let warp_time = started.elapsed();

    let started = Instant::now();
    let (bg_views, fg_views): (Vec<_>, Vec<_>) = warped.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let bg_views: Vec<WarpedView> = bg_views.into_iter().map(|(_, v)| v).collect();
    let fg_views: Vec<WarpedView> = fg_views.into_iter().map(|(_, v)| v).collect();
    let distances: Vec<f64> = references.iter().map(|r| r.1).collect();
    let distances = &distances;
    let (background_layer, foreground_layer) =
        rayon::join(|| blend(&bg_views, distances, config.epsilon), || blend(&fg_views, distances, config.epsilon));
    let blend_time = started.elapsed();

    let started = Instant::now();
    let composite = composite(&background_layer, &foreground_layer);
    let final_frame = fill_holes(&composite);
    let composite_time = started.elapsed();

    Ok((
        LayeredFrame { background: background_layer, foreground: foreground_layer, composite, final_frame },
        SynthesisTimings { warp: warp_time, blend: blend_time, composite: composite_time },
    ))
}

/// Luma PSNR in dB over the pixels where `mask` is set (all pixels if
/// `None`). Identical inputs give infinity.
pub fn luma_psnr(a: &I420Frame, b: &I420Frame, mask: Option<&[bool]>) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..a.y.len() {
        if mask.is_none_or(|m| m[i]) {
            let d = f64::from(a.y[i]) - f64::from(b.y[i]);
            se += d * d;
            n += 1;
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64 * 255.0 / (se / n as f64)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::scene_sim::{ArcRigSpec, Checker, Wall};
    use nalgebra::{Matrix3, Point3};

    fn quantizer() -> DepthQuantizer {
        DepthQuantizer::new(0.5, 20.0).unwrap()
    }

    fn cam(id: CameraId, x: f64, w: u32, h: u32) -> CameraModel {
        let k = CameraIntrinsics::new(100.0, 100.0, f64::from(w) / 2.0, f64::from(h) / 2.0, w, h).unwrap();
        CameraModel::new(id, k, CameraPose::from_center(Point3::new(x, 0.0, 0.0), Matrix3::identity()).unwrap())
    }

    fn textured(w: u32, h: u32) -> I420Frame {
        let rgb: Vec<u8> = (0..w * h).flat_map(|i| [(i * 7 % 251) as u8, (i * 13 % 241) as u8, (i * 29 % 239) as u8]).collect();
        I420Frame::from_rgb(w, h, &rgb).unwrap()
    }

    #[test]
    fn weights_match_normalized_inverse_distance() {
        let w = blend_weights(&[1.0, 2.0, 2.0]);
        let raw = [1.0 / 1.01, 1.0 / 2.01, 1.0 / 2.01];
        let sum: f64 = raw.iter().sum();
        for (got, r) in w.iter().zip(raw) {
            assert!((got - r / sum).abs() < 1e-15);
        }
        assert!((w[0] - 0.498_759_305).abs() < 1e-9 && (w[1] - 0.250_620_347).abs() < 1e-9);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let (w, h) = (64, 48);
        let c = cam(0, 0.0, w, h);
        let color = textured(w, h);
        let codes: Vec<u16> = (0..w * h).map(|i| if i % 17 == 0 { 0 } else { 500 + (i % 300) as u16 }).collect();
        let depth = DepthMap::new(w, h, codes).unwrap();
        for splat in [SplatMode::Nearest, SplatMode::Square2x2] {
            let out = forward_warp(&color, &depth, &quantizer(), &c, &c, PixelFilter::All, splat);
            for i in 0..(w * h) as usize {
                let code = depth.codes()[i];
                if code == 0 {
                    continue;
                }
                assert!(out.valid[i]);
                assert_eq!(out.color.y[i], color.y[i]);
                let z = quantizer().dequantize(code).unwrap();
                assert!((out.depth[i] - z).abs() < quantizer().step_at(z));
            }
        }
    }

    #[test]
    fn point_lands_at_analytic_projection() {
        let (w, h) = (64, 48);
        let src = cam(0, 0.0, w, h);
        let dst = cam(1, 0.3, w, h);
        let mut codes = vec![0u16; (w * h) as usize];
        let q = quantizer();
        let code = q.quantize(2.0);
        codes[(20 * w + 40) as usize] = code;
        let depth = DepthMap::new(w, h, codes).unwrap();
        let out = forward_warp(&textured(w, h), &depth, &q, &src, &dst, PixelFilter::All, SplatMode::Nearest);
        // Hand projection: the 3D point, then the pinhole formula in dst.
        let z = q.dequantize(code).unwrap();
        let x = (40.0 - 32.0) / 100.0 * z;
        let y = (20.0 - 24.0) / 100.0 * z;
        let u = 100.0 * (x - 0.3) / z + 32.0;
        let v = 100.0 * y / z + 24.0;
        let target = (v.round() as u32 * w + u.round() as u32) as usize;
        assert_eq!(out.valid.iter().filter(|v| **v).count(), 1);
        assert!(out.valid[target]);
    }

    #[test]
    fn z_buffer_keeps_nearer_surface() {
        // Two source pixels whose rays converge on one destination pixel:
        // x = 0.5 m at z = 1 and z = 5, both straight ahead of dst.
        let (w, h) = (128, 48);
        let src = cam(0, 0.0, w, h);
        let dst = cam(1, 0.5, w, h);
        let q = quantizer();
        let mut codes = vec![0u16; (w * h) as usize];
        let mut color = I420Frame::black(w, h).unwrap();
        let (near_col, far_col) = (64 + 50, 64 + 10);
        codes[(24 * w + near_col) as usize] = q.quantize(1.0);
        codes[(24 * w + far_col) as usize] = q.quantize(5.0);
        color.y[(24 * w + near_col) as usize] = 200;
        color.y[(24 * w + far_col) as usize] = 50;
        let depth = DepthMap::new(w, h, codes).unwrap();
        let out = forward_warp(&color, &depth, &q, &src, &dst, PixelFilter::All, SplatMode::Nearest);
        let hit = (24 * w + 64) as usize;
        assert_eq!(out.valid_count(), 1);
        assert_eq!(out.color.y[hit], 200);
        assert!((out.depth[hit] - 1.0).abs() < 0.01);
    }

    #[test]
    fn fronto_parallel_plane_shifts_by_disparity() {
        let (w, h) = (96, 48);
        let q = quantizer();
        let scene = Scene { name: "plane".into(), background: vec![Wall { axis: 2, offset: 2.5, texture: Checker::seeded(3, 0.2) }], foreground: vec![] };
        let src = cam(0, 0.0, w, h);
        let baseline = 0.2;
        let dst = cam(1, baseline, w, h);
        let view = render(&scene, &src, Timestamp(0), &q);
        let out = forward_warp(&view.color, &view.depth, &q, &src, &dst, PixelFilter::All, SplatMode::Nearest);
        // The plane shifts left by f·b/z, so the right edge strip is empty.
        let z = q.dequantize(view.depth.get(10, 10)).unwrap();
        let disparity = (100.0 * baseline / z).round() as u32;
        for row in 0..h {
            assert!(!out.valid[(row * w + w - 1) as usize]);
            assert!(out.valid[(row * w + w - disparity - 2) as usize]);
        }
        let dst_view = render(&scene, &dst, Timestamp(0), &q);
        let mut checked = 0;
        for row in 0..h {
            for col in 0..w {
                let i = (row * w + col) as usize;
                if out.valid[i] {
                    checked += 1;
                    // Same texture as the oracle render within one pixel.
                    let lo = col.saturating_sub(1);
                    let hi = (col + 1).min(w - 1);
                    assert!((lo..=hi).any(|c| dst_view.color.y[(row * w + c) as usize] == out.color.y[i]));
                }
            }
        }
        assert!(checked > (w * h / 2) as usize);
    }

    #[test]
    fn blend_of_identical_views_is_identity() {
        let (w, h) = (32, 24);
        let c = cam(0, 0.0, w, h);
        let depth = DepthMap::filled(w, h, 1500).unwrap();
        let v = forward_warp(&textured(w, h), &depth, &quantizer(), &c, &c, PixelFilter::All, SplatMode::Nearest);
        let out = blend(&[v.clone(), v.clone(), v.clone()], &[1.0, 2.0, 3.0], 0.05);
        assert_eq!(out.color, v.color);
        assert_eq!(out.valid, v.valid);
    }

    #[test]
    fn occluded_contribution_is_excluded() {
        let (w, h) = (4, 2);
        let mut near = WarpedView::empty(w, h, 0);
        let mut far = WarpedView::empty(w, h, 1);
        for i in 0..8 {
            near.valid[i] = true;
            near.depth[i] = 2.0;
            near.color.y[i] = 100;
            far.valid[i] = true;
            far.depth[i] = 2.5;
            far.color.y[i] = 250;
        }
        let out = blend(&[far.clone(), near.clone(), near.clone()], &[0.1, 1.0, 1.0], 0.05);
        assert!(out.color.y.iter().all(|y| *y == 100));
        assert!(out.depth.iter().all(|d| (*d - 2.0).abs() < 1e-12));
        // Within epsilon, all three mix with the inverse-distance weights.
        far.depth.fill(2.01);
        let out = blend(&[far, near.clone(), near], &[1.0, 2.0, 2.0], 0.05);
        let wts = blend_weights(&[1.0, 2.0, 2.0]);
        assert_eq!(out.color.y[0], (wts[0] * 250.0 + (wts[1] + wts[2]) * 100.0).round() as u8);
    }

    #[test]
    fn blend_invalid_only_where_all_invalid() {
        let (w, h) = (4, 2);
        let mut a = WarpedView::empty(w, h, 0);
        let b = WarpedView::empty(w, h, 1);
        a.valid[3] = true;
        a.depth[3] = 1.0;
        a.color.y[3] = 77;
        let out = blend(&[a, b.clone(), b], &[1.0, 1.0, 1.0], 0.05);
        assert_eq!(out.valid.iter().filter(|v| **v).count(), 1);
        assert_eq!(out.color.y[3], 77);
    }

    #[test]
    fn holes_fill_from_farther_side() {
        let (w, h) = (8, 2);
        let mut v = WarpedView::empty(w, h, 0);
        let row = [(true, 1.0, 10), (false, 0.0, 0), (false, 0.0, 0), (true, 5.0, 90), (true, 5.0, 90), (false, 0.0, 0), (true, 2.0, 30), (false, 0.0, 0)];
        for (i, (valid, z, y)) in row.iter().enumerate() {
            v.valid[i] = *valid;
            v.depth[i] = if *valid { *z } else { f64::INFINITY };
            v.color.y[i] = *y;
        }
        let out = fill_holes(&v);
        assert_eq!(&out.y[..8], &[10, 90, 90, 90, 90, 90, 30, 30]);
        // Empty second row copies the filled first row.
        assert_eq!(&out.y[8..], &out.y[..8]);
    }

    #[test]
    fn background_model_rejects_holes_and_round_trips() {
        let mut maps = BTreeMap::new();
        maps.insert(0, DepthMap::new(2, 2, vec![1, 2, 0, 4]).unwrap());
        assert!(matches!(BackgroundModel::new(maps), Err(SynthesisError::InvalidBackground { camera: 0, .. })));

        let rig = ArcRigSpec::default().with_resolution(32, 18).build();
        let scene = Scene::by_name("default").unwrap();
        let model = build_background_model(&rig, BackgroundSource::Oracle(&scene)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), &rig).unwrap();
        let (loaded, loaded_rig) = BackgroundModel::load(dir.path()).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_rig, rig);
        std::fs::remove_file(dir.path().join("cam4.fvvd")).unwrap();
        assert!(BackgroundModel::load(dir.path()).is_err());
    }

    #[test]
    fn full_depth_selects_by_mask() {
        let rig = ArcRigSpec::default().with_resolution(64, 36).build();
        let scene = Scene::by_name("sphere").unwrap();
        let model = build_background_model(&rig, BackgroundSource::Oracle(&scene)).unwrap();
        let cam = &rig.cameras()[4];
        let view = render(&scene, cam, Timestamp(0), rig.quantizer());
        let frame = TimedFrame::from_view(cam.id, Timestamp(0), &view);
        assert!(view.fg_mask.count() > 0);
        assert_eq!(full_depth(&frame, &model).unwrap(), view.depth);

        let mut empty = frame.clone();
        empty.foreground_mask = Mask::new(64, 36);
        assert_eq!(&full_depth(&empty, &model).unwrap(), model.get(cam.id).unwrap());

        let mut full = frame.clone();
        full.foreground_mask = Mask::from_bits(64, 36, vec![true; 64 * 36]).unwrap();
        assert_eq!(full_depth(&full, &model).unwrap(), unpack_depth(&frame.foreground_depth));

        let mut stranger = frame;
        stranger.camera_id = 77;
        assert!(matches!(full_depth(&stranger, &model), Err(SynthesisError::MissingBackground(77))));
    }

    #[test]
    fn psnr_basics() {
        let a = I420Frame::filled(4, 4, 100, 128, 128).unwrap();
        let mut b = a.clone();
        assert!(luma_psnr(&a, &b, None).is_infinite());
        b.y[0] = 110;
        let expected = 10.0 * (255.0f64 * 255.0 / (100.0 / 16.0)).log10();
        assert!((luma_psnr(&a, &b, None) - expected).abs() < 1e-9);
        let mut mask = vec![true; 16];
        mask[0] = false;
        assert!(luma_psnr(&a, &b, Some(&mask)).is_infinite());
    }
}
