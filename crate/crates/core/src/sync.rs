//! Software frame synchronization.
//!
//! Capture nodes correct their timestamps onto a shared clock using a
//! two-way timestamp exchange, and the [`Assembler`] groups per-camera frames
//! into [`FrameSet`]s on a fixed tick grid.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_codec::{pack_depth, DepthMap, PackedDepthFrame};
use crate::frame::{I420Frame, Mask};
use crate::geometry::{CameraId, CameraIntrinsics, INVALID_DEPTH_CODE};
use crate::scene_sim::RenderedView;

/// Microseconds since the shared epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn abs_diff(self, other: Timestamp) -> u64 {
        self.0.abs_diff(other.0)
    }

    pub fn saturating_add(self, us: u64) -> Timestamp {
        Timestamp(self.0.saturating_add(us))
    }

    pub fn saturating_sub(self, us: u64) -> Timestamp {
        Timestamp(self.0.saturating_sub(us))
    }

    /// Applies a signed correction, saturating at the ends of the range.
    pub fn offset_by(self, us: i64) -> Timestamp {
        Timestamp(self.0.saturating_add_signed(us))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}µs", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("exchange is not monotone on the client: t4 ({t4}) < t1 ({t1})")]
    NonMonotoneExchange { t1: Timestamp, t4: Timestamp },
    #[error("exchange implies negative path delay ({0} µs round trip)")]
    NegativeDelay(i64),
    #[error("camera {camera}: frame at {ts} arrived after {previous}")]
    OutOfOrder { camera: CameraId, ts: Timestamp, previous: Timestamp },
    #[error("camera {camera} stream lost: no fresh frame for {staleness} ticks")]
    StreamLost { camera: CameraId, staleness: u32 },
    #[error("tolerance {tolerance_us} µs exceeds half the period {period_us} µs")]
    InvalidTolerance { period_us: u64, tolerance_us: u64 },
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("clock drift {0} ppm outside ±200 ppm")]
    DriftOutOfRange(f64),
}

/// Result of a two-way exchange. `offset` is server clock minus client clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockEstimate {
    pub offset_us: i64,
    pub delay_us: u64,
}

/// Offset and one-way delay from a request/response exchange: the client
/// sends at `t1`, the server receives at `t2` and replies at `t3`, the client
/// receives at `t4`. `t1`/`t4` are client-clock readings, `t2`/`t3` server.
pub fn estimate_offset(t1: Timestamp, t2: Timestamp, t3: Timestamp, t4: Timestamp) -> Result<ClockEstimate, SyncError> {
    if t4 < t1 {
        return Err(SyncError::NonMonotoneExchange { t1, t4 });
    }
    let (t1, t2, t3, t4) = (i128::from(t1.0), i128::from(t2.0), i128::from(t3.0), i128::from(t4.0));
    let round_trip = (t4 - t1) - (t3 - t2);
    if round_trip < 0 {
        return Err(SyncError::NegativeDelay(round_trip as i64));
    }
    let offset = ((t2 - t1) + (t3 - t4)).div_euclid(2);
    Ok(ClockEstimate { offset_us: offset as i64, delay_us: (round_trip / 2) as u64 })
}

/// Picks the exchange with the smallest delay, the usual filter against
/// queueing noise.
pub fn best_estimate(estimates: &[ClockEstimate]) -> Option<ClockEstimate> {
    estimates.iter().copied().min_by_key(|e| e.delay_us)
}

/// Local clock of a simulated node relative to true time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset_us: i64,
    pub drift_ppm: f64,
    /// True time at which the accumulated drift is zero.
    pub reference: Timestamp,
}

pub const MAX_DRIFT_PPM: f64 = 200.0;

impl ClockModel {
    pub fn new(offset_us: i64, drift_ppm: f64, reference: Timestamp) -> Result<Self, SyncError> {
        if !drift_ppm.is_finite() || drift_ppm.abs() > MAX_DRIFT_PPM {
            return Err(SyncError::DriftOutOfRange(drift_ppm));
        }
        Ok(Self { offset_us, drift_ppm, reference })
    }

    pub fn perfect() -> Self {
        Self { offset_us: 0, drift_ppm: 0.0, reference: Timestamp(0) }
    }

    /// Reading of this clock at the given true time.
    pub fn local_time(&self, true_time: Timestamp) -> Timestamp {
        let elapsed = true_time.0 as f64 - self.reference.0 as f64;
        let drift = (elapsed * self.drift_ppm / 1e6).round() as i64;
        true_time.offset_by(self.offset_us.saturating_add(drift))
    }
}

/// Runs one exchange between two simulated clocks and returns `(t1, t2, t3, t4)`.
pub fn simulate_exchange(
    client: &ClockModel,
    server: &ClockModel,
    send_at: Timestamp,
    forward_delay_us: u64,
    server_hold_us: u64,
    reverse_delay_us: u64,
) -> [Timestamp; 4] {
    let arrive = send_at.saturating_add(forward_delay_us);
    let reply = arrive.saturating_add(server_hold_us);
    let back = reply.saturating_add(reverse_delay_us);
    [client.local_time(send_at), server.local_time(arrive), server.local_time(reply), client.local_time(back)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblerConfig {
    pub period_us: u64,
    pub tolerance_us: u64,
    pub max_staleness: u32,
    /// Tick grid origin; ticks fall on `phase + k * period`. Without one the
    /// grid starts at the earliest first frame.
    pub phase: Option<Timestamp>,
}

pub const DEFAULT_PERIOD_US: u64 = 33_333;
pub const DEFAULT_MAX_STALENESS: u32 = 5;

impl Default for AssemblerConfig {
    fn default() -> Self {
        Self { period_us: DEFAULT_PERIOD_US, tolerance_us: DEFAULT_PERIOD_US / 2, max_staleness: DEFAULT_MAX_STALENESS, phase: None }
    }
}

impl AssemblerConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        if self.period_us == 0 {
            return Err(SyncError::ZeroPeriod);
        }
        if self.tolerance_us > self.period_us / 2 {
            return Err(SyncError::InvalidTolerance { period_us: self.period_us, tolerance_us: self.tolerance_us });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetEntry<T> {
    pub frame: T,
    pub capture_ts: Timestamp,
    /// Number of consecutive ticks this frame has been repeated; 0 is fresh.
    pub staleness: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet<T> {
    pub tick_ts: Timestamp,
    pub frames: BTreeMap<CameraId, SetEntry<T>>,
}

impl<T> FrameSet<T> {
    pub fn is_fresh(&self) -> bool {
        self.frames.values().all(|e| e.staleness == 0)
    }

    pub fn max_staleness(&self) -> u32 {
        self.frames.values().map(|e| e.staleness).max().unwrap_or(0)
    }

    /// Capture-time spread among fresh frames.
    pub fn fresh_spread_us(&self) -> u64 {
        let fresh = self.frames.values().filter(|e| e.staleness == 0).map(|e| e.capture_ts.0);
        let (lo, hi) = fresh.fold((u64::MAX, 0), |(lo, hi), t| (lo.min(t), hi.max(t)));
        hi.saturating_sub(lo)
    }

    pub fn camera_ids(&self) -> Vec<CameraId> {
        self.frames.keys().copied().collect()
    }

    pub fn map<U>(self, mut f: impl FnMut(CameraId, T) -> U) -> FrameSet<U> {
        FrameSet {
            tick_ts: self.tick_ts,
            frames: self
                .frames
                .into_iter()
                .map(|(id, e)| (id, SetEntry { frame: f(id, e.frame), capture_ts: e.capture_ts, staleness: e.staleness }))
                .collect(),
        }
    }
}

#[derive(Debug)]
struct Stream<T> {
    queue: VecDeque<(Timestamp, T)>,
    last_emitted: Option<(Timestamp, T)>,
    staleness: u32,
    horizon: Option<Timestamp>,
    closed: bool,
}

impl<T> Default for Stream<T> {
    fn default() -> Self {
        Self { queue: VecDeque::new(), last_emitted: None, staleness: 0, horizon: None, closed: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Poll<T> {
    Ready(FrameSet<T>),
    /// The current tick cannot be decided until these cameras deliver a
    /// frame past the tolerance window (or close).
    Pending(Vec<CameraId>),
    /// Every required stream is closed and drained.
    Exhausted,
}

enum Choice {
    Fresh(usize),
    Stale,
    Unavailable,
}

/// Groups timestamp-ordered per-camera frames into one set per tick.
///
/// For each tick the frame nearest the tick within the tolerance is chosen
/// (the earlier on ties). A camera without such a frame repeats its last
/// emitted frame with its staleness incremented. No set is emitted until
/// every required camera has produced a frame.
#[derive(Debug)]
pub struct Assembler<T> {
    config: AssemblerConfig,
    streams: BTreeMap<CameraId, Stream<T>>,
    next_tick: Option<Timestamp>,
}

impl<T: Clone> Assembler<T> {
    pub fn new(config: AssemblerConfig) -> Result<Self, SyncError> {
        config.validate()?;
        Ok(Self { config, streams: BTreeMap::new(), next_tick: None })
    }

    pub fn config(&self) -> &AssemblerConfig {
        &self.config
    }

    pub fn add_camera(&mut self, camera: CameraId) {
        self.streams.entry(camera).or_default();
    }

    pub fn push(&mut self, camera: CameraId, ts: Timestamp, frame: T) -> Result<(), SyncError> {
        let stream = self.streams.entry(camera).or_default();
        if let Some(previous) = stream.horizon {
            if ts < previous {
                return Err(SyncError::OutOfOrder { camera, ts, previous });
            }
        }
        stream.horizon = Some(ts);
        stream.queue.push_back((ts, frame));
        Ok(())
    }

    /// Marks a stream as finished; its tick decisions no longer wait on it.
    pub fn close(&mut self, camera: CameraId) {
        self.streams.entry(camera).or_default().closed = true;
    }

    pub fn remove(&mut self, camera: CameraId) {
        self.streams.remove(&camera);
    }

    pub fn cameras(&self) -> Vec<CameraId> {
        self.streams.keys().copied().collect()
    }

    pub fn next_tick(&self) -> Option<Timestamp> {
        self.next_tick
    }

    /// Latest timestamp pushed for a camera.
    pub fn horizon(&self, camera: CameraId) -> Option<Timestamp> {
        self.streams.get(&camera).and_then(|s| s.horizon)
    }

    pub fn queued(&self, camera: CameraId) -> usize {
        self.streams.get(&camera).map_or(0, |s| s.queue.len())
    }

    /// Moves the tick grid forward to the grid tick at or before `tick`,
    /// abandoning the ticks in between (frame dropping under overload).
    pub fn skip_to(&mut self, tick: Timestamp) {
        if let Some(next) = self.next_tick {
            if tick > next {
                let steps = (tick.0 - next.0) / self.config.period_us;
                self.next_tick = Some(Timestamp(next.0 + steps * self.config.period_us));
            }
        }
    }

    /// Drops queued frames older than `cutoff` on every stream except
    /// `keep`, remembering the newest dropped frame so the stream can repeat
    /// it if it becomes required before a fresh frame arrives.
    pub fn retire_before(&mut self, cutoff: Timestamp, keep: &[CameraId]) {
        for (id, s) in self.streams.iter_mut() {
            if keep.contains(id) {
                continue;
            }
            while s.queue.front().is_some_and(|(ts, _)| *ts < cutoff) {
                s.last_emitted = s.queue.pop_front();
                s.staleness = 0;
            }
        }
    }

    fn first_tick(&self, earliest: Timestamp) -> Timestamp {
        let Some(phase) = self.config.phase else { return earliest };
        let period = i128::from(self.config.period_us);
        let lower = i128::from(earliest.0) - i128::from(self.config.tolerance_us);
        let k = (lower - i128::from(phase.0)).div_euclid(period);
        let mut tick = i128::from(phase.0) + k * period;
        if tick < lower {
            tick += period;
        }
        Timestamp(tick.max(0) as u64)
    }

    /// Tries to produce the set for the next tick over `required` cameras.
    pub fn poll(&mut self, required: &[CameraId]) -> Result<Poll<T>, SyncError> {
        self.poll_inner(required, false)
    }

    /// Decides the next tick with whatever has arrived, treating cameras
    /// that have not delivered as missing. Used when a real-time deadline
    /// passes.
    pub fn force(&mut self, required: &[CameraId]) -> Result<Poll<T>, SyncError> {
        self.poll_inner(required, true)
    }

    fn poll_inner(&mut self, required: &[CameraId], force: bool) -> Result<Poll<T>, SyncError> {
        for id in required {
            self.streams.entry(*id).or_default();
        }
        loop {
            if required.iter().all(|id| {
                let s = &self.streams[id];
                s.closed && s.queue.is_empty()
            }) {
                return Ok(Poll::Exhausted);
            }
            let tick = match self.next_tick {
                Some(t) => t,
                None => {
                    let waiting: Vec<CameraId> = required
                        .iter()
                        .copied()
                        .filter(|id| {
                            let s = &self.streams[id];
                            s.horizon.is_none() && !s.closed
                        })
                        .collect();
                    if !waiting.is_empty() && !force {
                        return Ok(Poll::Pending(waiting));
                    }
                    let earliest = required.iter().filter_map(|id| self.streams[id].queue.front().map(|(ts, _)| *ts)).min();
                    match earliest {
                        Some(e) => {
                            let t = self.first_tick(e);
                            self.next_tick = Some(t);
                            t
                        }
                        None => return Ok(Poll::Pending(waiting)),
                    }
                }
            };
            let window_end = tick.saturating_add(self.config.tolerance_us);
            let window_start = tick.saturating_sub(self.config.tolerance_us);

            if !force {
                let waiting: Vec<CameraId> = required
                    .iter()
                    .copied()
                    .filter(|id| {
                        let s = &self.streams[id];
                        !s.closed && s.horizon.is_none_or(|h| h <= window_end)
                    })
                    .collect();
                if !waiting.is_empty() {
                    return Ok(Poll::Pending(waiting));
                }
            }

            // Decide every camera before mutating anything so a lost stream
            // leaves the assembler untouched.
            let mut choices = Vec::with_capacity(required.len());
            for id in required {
                let s = &self.streams[id];
                let mut best: Option<(usize, u64)> = None;
                for (i, (ts, _)) in s.queue.iter().enumerate() {
                    if *ts < window_start {
                        continue;
                    }
                    if *ts > window_end {
                        break;
                    }
                    let d = ts.abs_diff(tick);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let choice = match best {
                    Some((i, _)) => Choice::Fresh(i),
                    None if s.last_emitted.is_some() => {
                        if s.staleness + 1 > self.config.max_staleness {
                            return Err(SyncError::StreamLost { camera: *id, staleness: s.staleness + 1 });
                        }
                        Choice::Stale
                    }
                    None => Choice::Unavailable,
                };
                choices.push(choice);
            }
            let complete = !choices.iter().any(|c| matches!(c, Choice::Unavailable));

            let mut frames = BTreeMap::new();
            for (id, choice) in required.iter().zip(choices) {
                let s = self.streams.get_mut(id).expect("registered above");
                match choice {
                    Choice::Fresh(i) => {
                        let picked = s.queue.drain(..=i).last().expect("index within queue");
                        if complete {
                            s.staleness = 0;
                            frames.insert(*id, SetEntry { frame: picked.1.clone(), capture_ts: picked.0, staleness: 0 });
                            s.last_emitted = Some(picked);
                        }
                    }
                    Choice::Stale => {
                        while s.queue.front().is_some_and(|(ts, _)| *ts < window_start) {
                            s.queue.pop_front();
                        }
                        if complete {
                            s.staleness += 1;
                            let (ts, frame) = s.last_emitted.clone().expect("stale implies a previous frame");
                            frames.insert(*id, SetEntry { frame, capture_ts: ts, staleness: s.staleness });
                        }
                    }
                    Choice::Unavailable => {
                        while s.queue.front().is_some_and(|(ts, _)| *ts < window_start) {
                            s.queue.pop_front();
                        }
                    }
                }
            }
            self.next_tick = Some(tick.saturating_add(self.config.period_us));
            if complete {
                return Ok(Poll::Ready(FrameSet { tick_ts: tick, frames }));
            }
            if force {
                return Ok(Poll::Pending(Vec::new()));
            }
        }
    }
}

/// Offline assembly over finite, timestamp-ordered queues. Yields sets until
/// the streams are exhausted or a stream is lost (yielded as the last item).
pub fn assemble<T: Clone>(
    streams: BTreeMap<CameraId, Vec<(Timestamp, T)>>,
    config: AssemblerConfig,
) -> Result<impl Iterator<Item = Result<FrameSet<T>, SyncError>>, SyncError> {
    let mut assembler = Assembler::new(config)?;
    let required: Vec<CameraId> = streams.keys().copied().collect();
    for (camera, frames) in streams {
        for (ts, frame) in frames {
            assembler.push(camera, ts, frame)?;
        }
        assembler.close(camera);
    }
    let mut done = false;
    Ok(std::iter::from_fn(move || {
        if done {
            return None;
        }
        match assembler.poll(&required) {
            Ok(Poll::Ready(set)) => Some(Ok(set)),
            Ok(Poll::Exhausted) | Ok(Poll::Pending(_)) => {
                done = true;
                None
            }
            Err(e) => {
                done = true;
                Some(Err(e))
            }
        }
    }))
}

/// One camera's capture for a tick, timestamped on the shared clock. Depth
/// is carried only for foreground pixels; everything else is code 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedFrame {
    pub camera_id: CameraId,
    pub capture_ts: Timestamp,
    pub color: I420Frame,
    pub foreground_depth: PackedDepthFrame,
    pub foreground_mask: Mask,
}

impl TimedFrame {
    /// Builds the transmitted frame from a full render, dropping depth
    /// outside the foreground mask.
    pub fn from_view(camera_id: CameraId, capture_ts: Timestamp, view: &RenderedView) -> Self {
        let codes = view
            .depth
            .codes()
            .iter()
            .zip(view.fg_mask.bits())
            .map(|(c, fg)| if *fg { *c } else { INVALID_DEPTH_CODE })
            .collect();
        let fg = DepthMap::new(view.depth.width(), view.depth.height(), codes).expect("dimensions copied from a valid map");
        Self {
            camera_id,
            capture_ts,
            color: view.color.clone(),
            foreground_depth: pack_depth(&fg),
            foreground_mask: view.fg_mask.clone(),
        }
    }

    /// Checks that every plane matches the camera's image size.
    pub fn check_dimensions(&self, intrinsics: &CameraIntrinsics) -> Result<(), String> {
        let want = (intrinsics.width, intrinsics.height);
        for (what, got) in [
            ("color", (self.color.width(), self.color.height())),
            ("depth", (self.foreground_depth.width(), self.foreground_depth.height())),
            ("mask", (self.foreground_mask.width(), self.foreground_mask.height())),
        ] {
            if got != want {
                return Err(format!("{what} is {}x{}, camera is {}x{}", got.0, got.1, want.0, want.1));
            }
        }
        Ok(())
    }
}
