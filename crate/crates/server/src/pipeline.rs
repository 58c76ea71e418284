//! Per-tick processing: select, synthesize, encode. No I/O; the server loop
//! feeds it assembled sets and ships what it returns.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fvv_core::geometry::VIRTUAL_CAMERA_ID;
use fvv_core::selection::{select, SelectionParams, ViewState};
use fvv_core::sync::TimedFrame;
use fvv_core::synthesis::{synthesize_refs, BackgroundModel, SynthesisConfig};
use fvv_core::transport::{ControlMessage, MediaMessage};
use fvv_core::{CameraId, CameraModel, FrameSet, I420Frame, Rig, Timestamp};

use crate::config::OutputEncoding;
use crate::stats::{micros, PipelineStats, StageTimings};
use crate::ServerError;

/// A frame as held by the assembler. `frame` is `None` when the payload was
/// dropped at the socket because the camera was not subscribed.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub frame: Option<Arc<TimedFrame>>,
    pub arrived: Instant,
}

#[derive(Debug, Clone)]
pub struct TickOutput {
    pub tick_ts: Timestamp,
    pub frame: MediaMessage,
    /// Present when the active or subscribed set changed this tick.
    pub report: Option<ControlMessage>,
    pub view: ViewState,
}

pub struct Pipeline {
    rig: Rig,
    background: BackgroundModel,
    synthesis: SynthesisConfig,
    params: SelectionParams,
    output: OutputEncoding,
    viewpoint: Option<CameraModel>,
    view: Option<ViewState>,
    reported: Option<ViewState>,
    lost: BTreeSet<CameraId>,
    stats: PipelineStats,
}

impl Pipeline {
    pub fn new(
        rig: Rig,
        background: BackgroundModel,
        synthesis: SynthesisConfig,
        params: SelectionParams,
        output: OutputEncoding,
    ) -> Result<Self, ServerError> {
        background.check_rig(&rig).map_err(|e| ServerError::Startup(e.to_string()))?;
        Ok(Self {
            rig,
            background,
            synthesis,
            params,
            output,
            viewpoint: None,
            view: None,
            reported: None,
            lost: BTreeSet::new(),
            stats: PipelineStats::default(),
        })
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut PipelineStats {
        &mut self.stats
    }

    pub fn view(&self) -> Option<&ViewState> {
        self.view.as_ref()
    }

    /// Takes effect at the next [`Pipeline::prepare_tick`].
    pub fn set_viewpoint(&mut self, cam: CameraModel) {
        self.viewpoint = Some(cam);
    }

    pub fn has_viewpoint(&self) -> bool {
        self.viewpoint.is_some()
    }

    /// Excludes a camera from selection. Returns false if it was already lost.
    pub fn mark_lost(&mut self, camera: CameraId) -> bool {
        let fresh = self.lost.insert(camera);
        if fresh {
            self.stats.streams_lost += 1;
        }
        fresh
    }

    pub fn restore(&mut self, camera: CameraId) {
        self.lost.remove(&camera);
    }

    pub fn lost(&self) -> &BTreeSet<CameraId> {
        &self.lost
    }

    pub fn available(&self) -> Vec<CameraModel> {
        self.rig.cameras().iter().filter(|c| !self.lost.contains(&c.id)).copied().collect()
    }

    /// Runs selection for the coming tick. Returns the view, or `None` when
    /// idle (no viewpoint yet, or every camera lost).
    pub fn prepare_tick(&mut self, now: Timestamp) -> Option<&ViewState> {
        let virtual_cam = self.viewpoint?;
        let available = self.available();
        if available.is_empty() {
            self.view = None;
            return None;
        }
        // A lost camera must not linger as an incumbent.
        let prev = self.view.as_ref().map(|v| {
            let mut v = v.clone();
            let keep: Vec<usize> = (0..v.active.len()).filter(|i| !self.lost.contains(&v.active[*i])).collect();
            v.active = keep.iter().map(|i| v.active[*i]).collect();
            v.active_distances = keep.iter().map(|i| v.active_distances[*i]).collect();
            v
        });
        let view = select(&virtual_cam, &available, prev.as_ref(), &self.params, now);
        self.view = Some(view);
        self.view.as_ref()
    }

    /// Cameras the next set must cover.
    pub fn required(&self) -> Vec<CameraId> {
        match &self.view {
            Some(v) if self.viewpoint.is_some() => v.subscribed.iter().copied().collect(),
            _ => self.available().iter().map(|c| c.id).collect(),
        }
    }

    /// Cameras whose payloads must be decoded; `None` means all of them.
    pub fn decode_set(&self) -> Option<BTreeSet<CameraId>> {
        self.view.as_ref().filter(|_| self.viewpoint.is_some()).map(|v| v.subscribed.clone())
    }

    /// Consumes one assembled set. Returns the synthesized output, or `None`
    /// for idle ticks and ticks with no usable reference.
    pub fn process(&mut self, set: &FrameSet<Ingested>, assembly: Duration) -> Result<Option<TickOutput>, ServerError> {
        self.stats.ticks += 1;
        self.stats.last_tick_us = Some(set.tick_ts.0);
        let stale = set.frames.values().filter(|e| e.staleness > 0).count() as u64;
        self.stats.stale_frames += stale;

        let Some(view) = self.view.clone().filter(|_| self.viewpoint.is_some()) else {
            self.stats.idle_ticks += 1;
            return Ok(None);
        };

        let mut references = Vec::with_capacity(view.active.len());
        let mut earliest_arrival: Option<Instant> = None;
        for (id, d) in view.active.iter().zip(&view.active_distances) {
            if let Some(entry) = set.frames.get(id) {
                if let Some(frame) = entry.frame.frame.as_deref() {
                    references.push((*id, *d, frame));
                    let a = entry.frame.arrived;
                    earliest_arrival = Some(earliest_arrival.map_or(a, |e: Instant| e.min(a)));
                }
            }
        }
        if stale > 0 || references.len() < view.active.len() {
            self.stats.incomplete_sets += 1;
        }
        if references.is_empty() {
            return Ok(None);
        }

        let (layered, t) = synthesize_refs(&view.virtual_camera, &references, &self.background, &self.rig, &self.synthesis)
            .map_err(|e| ServerError::Synthesis(e.to_string()))?;
        let started = Instant::now();
        let frame = encode_output(&layered.final_frame, set.tick_ts, self.output)?;
        let encode = started.elapsed();

        let report = match &self.reported {
            Some(prev) if !prev.selection_differs(&view) => None,
            _ => {
                if self.reported.is_some() {
                    self.stats.selection_changes += 1;
                }
                self.reported = Some(view.clone());
                Some(ControlMessage::SelectionReport {
                    tick_ts: set.tick_ts.0,
                    active: view.active.clone(),
                    subscribed: view.subscribed.iter().copied().collect(),
                })
            }
        };
        let timings = StageTimings {
            assembly_us: micros(assembly),
            warp_us: micros(t.warp),
            blend_us: micros(t.blend),
            composite_us: micros(t.composite),
            encode_us: micros(encode),
        };
        let latency = earliest_arrival.map_or(0, |a| micros(a.elapsed()));
        self.stats.record_frame(timings, latency);
        Ok(Some(TickOutput { tick_ts: set.tick_ts, frame, report, view }))
    }
}

/// Packs a synthesized frame for the viewer.
pub fn encode_output(frame: &I420Frame, tick: Timestamp, encoding: OutputEncoding) -> Result<MediaMessage, ServerError> {
    match encoding {
        OutputEncoding::Raw => Ok(MediaMessage::color(VIRTUAL_CAMERA_ID, tick, frame, false)),
        OutputEncoding::Png => {
            let png = encode_png(frame)?;
            Ok(MediaMessage::png(VIRTUAL_CAMERA_ID, tick, frame.width(), frame.height(), png))
        }
    }
}

pub fn encode_png(frame: &I420Frame) -> Result<Vec<u8>, ServerError> {
    let rgb = frame.to_rgb();
    let mut out = Vec::with_capacity(rgb.len() / 2);
    let mut enc = png::Encoder::new(&mut out, frame.width(), frame.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let err = |e: png::EncodingError| ServerError::Encode(e.to_string());
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&rgb).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(out)
}
