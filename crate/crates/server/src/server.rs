//! The edge server: TCP listeners for capture media and control, the viewer
//! slot, heartbeats and the pipeline thread.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Select, Sender, TryRecvError};
use fvv_core::geometry::VIRTUAL_CAMERA_ID;
use fvv_core::sync::{Assembler, Poll, SyncError, TimedFrame};
use fvv_core::synthesis::BackgroundModel;
use fvv_core::transport::{
    read_control, read_media_body, read_media_header, skip_payload, viewpoint_camera, write_control, write_media,
    ControlMessage, MediaHeader, MediaMessage, MediaType, PeerRole, TransportError, ERR_BAD_VIEWPOINT, ERR_PROTOCOL,
    ERR_VIEWER_SLOT_TAKEN,
};
use fvv_core::{CameraId, CameraModel, Rig, Timestamp};
use tracing::{debug, info, warn};

use crate::clock::SharedClock;
use crate::config::{RunMode, ServerConfig};
use crate::liveness::{Liveness, HEARTBEAT_INTERVAL_US, PEER_TIMEOUT_US};
use crate::pipeline::{Ingested, Pipeline, TickOutput};
use crate::stats::PipelineStats;
use crate::ServerError;

/// Frames buffered per camera between its socket and the pipeline.
const INGEST_DEPTH: usize = 4;
/// Slack after the tolerance window before a real-time tick is forced.
const DEADLINE_MARGIN_US: u64 = 5_000;
const POLL_INTERVAL: Duration = Duration::from_millis(20);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);

enum IngestEvent {
    Frame(Timestamp, Ingested),
    Closed,
}

enum Event {
    Viewpoint(CameraModel),
    CameraHello(CameraId),
}

/// Serialized writes to one control connection.
#[derive(Clone)]
struct ControlWriter {
    id: u64,
    stream: Arc<Mutex<BufWriter<TcpStream>>>,
}

impl ControlWriter {
    fn new(id: u64, stream: TcpStream) -> Self {
        Self { id, stream: Arc::new(Mutex::new(BufWriter::new(stream))) }
    }

    fn send(&self, msg: &ControlMessage) -> Result<(), TransportError> {
        write_control(&mut *self.stream.lock().unwrap(), msg)
    }
}

#[derive(Default)]
struct ViewerSlot {
    owner: Option<u64>,
    control: Option<ControlWriter>,
    media: Option<(u64, Arc<Mutex<BufWriter<TcpStream>>>)>,
    last_seen: Timestamp,
}

struct Shared {
    stop: AtomicBool,
    next_conn: AtomicU64,
    clock: SharedClock,
    rig: Rig,
    stats: Mutex<PipelineStats>,
    liveness: Mutex<Liveness<CameraId>>,
    decode_set: RwLock<Option<BTreeSet<CameraId>>>,
    /// Last subscription state sent (or due) per camera.
    requested: Mutex<BTreeMap<CameraId, bool>>,
    nodes: Mutex<BTreeMap<CameraId, ControlWriter>>,
    controls: Mutex<BTreeMap<u64, ControlWriter>>,
    viewer: Mutex<ViewerSlot>,
    lost: Mutex<BTreeSet<CameraId>>,
    streams: Mutex<BTreeMap<u64, TcpStream>>,
    ingest: BTreeMap<CameraId, Sender<IngestEvent>>,
    events: Sender<Event>,
}

impl Shared {
    fn conn_id(&self) -> u64 {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    fn track(&self, id: u64, stream: &TcpStream) {
        if let Ok(s) = stream.try_clone() {
            self.streams.lock().unwrap().insert(id, s);
        }
    }

    fn untrack(&self, id: u64) {
        self.streams.lock().unwrap().remove(&id);
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub struct ServerHandle {
    pub media_addr: SocketAddr,
    pub control_addr: SocketAddr,
    pub bridge_addr: Option<SocketAddr>,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Point-in-time copy of the pipeline counters.
    pub fn stats(&self) -> PipelineStats {
        self.shared.stats.lock().unwrap().clone()
    }

    pub fn lost_cameras(&self) -> BTreeSet<CameraId> {
        self.shared.lost.lock().unwrap().clone()
    }

    /// Cameras currently asked to stream.
    pub fn requested_subscriptions(&self) -> BTreeSet<CameraId> {
        self.shared.requested.lock().unwrap().iter().filter(|(_, on)| **on).map(|(id, _)| *id).collect()
    }

    pub fn connected_cameras(&self) -> BTreeSet<CameraId> {
        self.shared.nodes.lock().unwrap().keys().copied().collect()
    }

    pub fn viewer_connected(&self) -> bool {
        self.shared.viewer.lock().unwrap().owner.is_some()
    }

    pub fn is_running(&self) -> bool {
        !self.shared.stopping()
    }

    /// Stops every thread and closes every connection.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in self.shared.streams.lock().unwrap().values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop_and_join();
        }
    }
}

fn listen(bind: &str, port: u16) -> Result<TcpListener, ServerError> {
    let l = TcpListener::bind((bind, port)).map_err(|e| ServerError::Startup(format!("cannot bind {bind}:{port}: {e}")))?;
    l.set_nonblocking(true).map_err(|e| ServerError::Startup(e.to_string()))?;
    Ok(l)
}

/// Starts the server. Ports of 0 bind ephemeral ports; see the handle for
/// the actual addresses.
pub fn start(
    config: &ServerConfig,
    rig: Rig,
    background: BackgroundModel,
    clock: SharedClock,
) -> Result<ServerHandle, ServerError> {
    config.validate()?;
    let pipeline = Pipeline::new(rig.clone(), background, config.synthesis(), config.selection(), config.output)?;
    let media = listen(&config.bind, config.media_port)?;
    let control = listen(&config.bind, config.control_port)?;
    let media_addr = media.local_addr().map_err(|e| ServerError::Startup(e.to_string()))?;
    let control_addr = control.local_addr().map_err(|e| ServerError::Startup(e.to_string()))?;

    let mut ingest = BTreeMap::new();
    let mut receivers = BTreeMap::new();
    let mut liveness = Liveness::new(PEER_TIMEOUT_US);
    let now = clock.now();
    for cam in rig.cameras() {
        let (tx, rx) = bounded(INGEST_DEPTH);
        ingest.insert(cam.id, tx);
        receivers.insert(cam.id, rx);
        // Cameras that never connect expire like silent ones.
        liveness.touch(cam.id, now);
    }
    let (events_tx, events_rx) = unbounded();
    let shared = Arc::new(Shared {
        stop: AtomicBool::new(false),
        next_conn: AtomicU64::new(1),
        clock,
        rig,
        stats: Mutex::new(PipelineStats::default()),
        liveness: Mutex::new(liveness),
        decode_set: RwLock::new(None),
        requested: Mutex::new(BTreeMap::new()),
        nodes: Mutex::new(BTreeMap::new()),
        controls: Mutex::new(BTreeMap::new()),
        viewer: Mutex::new(ViewerSlot::default()),
        lost: Mutex::new(BTreeSet::new()),
        streams: Mutex::new(BTreeMap::new()),
        ingest,
        events: events_tx,
    });

    let mut threads = Vec::new();
    let s = shared.clone();
    threads.push(spawn("media-accept", move || accept_loop(media, s, handle_media)));
    let s = shared.clone();
    threads.push(spawn("control-accept", move || accept_loop(control, s, handle_control)));
    let s = shared.clone();
    threads.push(spawn("heartbeat", move || heartbeat_loop(s)));
    let s = shared.clone();
    let cfg = config.clone();
    threads.push(spawn("pipeline", move || {
        let mut run = PipelineLoop::new(s, cfg, pipeline, receivers, events_rx);
        run.run();
    }));

    let bridge_addr = if config.bridge {
        let listener = listen(&config.bind, config.bridge_port)?;
        let addr = listener.local_addr().map_err(|e| ServerError::Startup(e.to_string()))?;
        let s = shared.clone();
        threads.push(spawn("bridge-accept", move || {
            crate::bridge::accept_loop(listener, control_addr, media_addr, || s.stopping())
        }));
        Some(addr)
    } else {
        None
    };
    info!(%media_addr, %control_addr, ?bridge_addr, mode = ?config.mode, "server listening");
    Ok(ServerHandle { media_addr, control_addr, bridge_addr, shared, threads })
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    thread::Builder::new().name(name.into()).spawn(f).expect("thread spawn")
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, handler: fn(Arc<Shared>, TcpStream, u64)) {
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
                let id = shared.conn_id();
                shared.track(id, &stream);
                debug!(%peer, conn = id, "accepted");
                let s = shared.clone();
                spawn("conn", move || {
                    handler(s.clone(), stream, id);
                    s.untrack(id);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_media(shared: Arc<Shared>, stream: TcpStream, conn: u64) {
    let mut reader = BufReader::with_capacity(1 << 16, stream.try_clone().expect("clone socket"));
    let first = match read_media_header(&mut reader) {
        Ok(Some(h)) => h,
        Ok(None) => return,
        Err(e) => {
            warn!(conn, error = %e, "bad first media message");
            return;
        }
    };
    if first.camera_id == VIRTUAL_CAMERA_ID {
        viewer_media(shared, reader, stream, conn, first);
    } else {
        capture_media(shared, reader, first);
    }
}

fn viewer_media(shared: Arc<Shared>, mut reader: BufReader<TcpStream>, stream: TcpStream, conn: u64, first: MediaHeader) {
    if skip_payload(&mut reader, first.payload_len).is_err() {
        return;
    }
    {
        let mut slot = shared.viewer.lock().unwrap();
        if slot.media.is_some() {
            warn!(conn, "second viewer media connection refused");
            return;
        }
        slot.media = Some((conn, Arc::new(Mutex::new(BufWriter::with_capacity(1 << 16, stream)))));
    }
    info!(conn, "viewer media attached");
    // Nothing else is expected from the viewer; wait for it to go away.
    while let Ok(Some(h)) = read_media_header(&mut reader) {
        if skip_payload(&mut reader, h.payload_len).is_err() {
            break;
        }
    }
    let mut slot = shared.viewer.lock().unwrap();
    if slot.media.as_ref().is_some_and(|(id, _)| *id == conn) {
        slot.media = None;
    }
    info!(conn, "viewer media detached");
}

#[derive(Default)]
struct Partial {
    ts: Option<Timestamp>,
    dropped: bool,
    color: Option<MediaMessage>,
    depth: Option<MediaMessage>,
    mask: Option<MediaMessage>,
    seen: u8,
}

fn capture_media(shared: Arc<Shared>, mut reader: BufReader<TcpStream>, first: MediaHeader) {
    let camera = first.camera_id;
    let Some(tx) = shared.ingest.get(&camera).cloned() else {
        warn!(camera, "media from a camera not in the calibration");
        return;
    };
    let Some(cam) = shared.rig.camera(camera).copied() else { return };
    info!(camera, "capture media connected");
    let _ = shared.events.send(Event::CameraHello(camera));
    let mut partial = Partial::default();
    let mut header = Some(first);
    loop {
        let h = match header.take() {
            Some(h) => h,
            None => match read_media_header(&mut reader) {
                Ok(Some(h)) => h,
                Ok(None) => break,
                Err(e) => {
                    if !shared.stopping() {
                        warn!(camera, error = %e, "media stream error");
                    }
                    break;
                }
            },
        };
        shared.liveness.lock().unwrap().touch(camera, shared.clock.now());
        if h.camera_id != camera {
            warn!(camera, other = h.camera_id, "camera id changed mid-stream");
            break;
        }
        if partial.ts != Some(h.capture_ts) {
            if partial.ts.is_some() && partial.seen != 0b111 {
                warn!(camera, ts = ?partial.ts, "incomplete frame discarded");
            }
            let dropped = shared.decode_set.read().unwrap().as_ref().is_some_and(|s| !s.contains(&camera));
            partial = Partial { ts: Some(h.capture_ts), dropped, ..Default::default() };
        }
        let bit = 1u8 << (h.msg_type as u8 - 1);
        let result = if partial.dropped {
            skip_payload(&mut reader, h.payload_len).map(|_| None)
        } else {
            read_media_body(&mut reader, h).map(Some)
        };
        let msg = match result {
            Ok(m) => m,
            Err(e) => {
                warn!(camera, error = %e, "media payload error");
                break;
            }
        };
        partial.seen |= bit;
        match h.msg_type {
            MediaType::Color => partial.color = msg,
            MediaType::PackedDepth => partial.depth = msg,
            MediaType::Mask => partial.mask = msg,
        }
        if partial.seen != 0b111 {
            continue;
        }
        let ts = h.capture_ts;
        let frame = if partial.dropped {
            None
        } else {
            match assemble_frame(camera, ts, &mut partial, &cam) {
                Ok(f) => Some(Arc::new(f)),
                Err(e) => {
                    warn!(camera, error = %e, "bad frame");
                    break;
                }
            }
        };
        partial = Partial::default();
        if tx.send(IngestEvent::Frame(ts, Ingested { frame, arrived: Instant::now() })).is_err() {
            return;
        }
    }
    let _ = tx.send(IngestEvent::Closed);
    info!(camera, "capture media closed");
}

fn assemble_frame(camera: CameraId, ts: Timestamp, p: &mut Partial, cam: &CameraModel) -> Result<TimedFrame, ServerError> {
    let err = |e: TransportError| ServerError::Protocol(e.to_string());
    let frame = TimedFrame {
        camera_id: camera,
        capture_ts: ts,
        color: p.color.take().expect("seen").to_color().map_err(err)?,
        foreground_depth: p.depth.take().expect("seen").to_depth().map_err(err)?,
        foreground_mask: p.mask.take().expect("seen").to_mask().map_err(err)?,
    };
    frame.check_dimensions(&cam.intrinsics).map_err(ServerError::Protocol)?;
    Ok(frame)
}

enum Peer {
    Unknown,
    Capture(CameraId),
    Viewer,
}

fn handle_control(shared: Arc<Shared>, stream: TcpStream, conn: u64) {
    let writer = ControlWriter::new(conn, stream.try_clone().expect("clone socket"));
    shared.controls.lock().unwrap().insert(conn, writer.clone());
    let mut reader = BufReader::new(stream);
    let mut peer = Peer::Unknown;
    loop {
        let msg = match read_control(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                if !shared.stopping() {
                    debug!(conn, error = %e, "control stream ended");
                }
                break;
            }
        };
        let received = shared.clock.now();
        match &peer {
            Peer::Capture(id) => shared.liveness.lock().unwrap().touch(*id, received),
            Peer::Viewer => shared.viewer.lock().unwrap().last_seen = received,
            Peer::Unknown => {}
        }
        let reply = match msg {
            ControlMessage::Hello { role: PeerRole::Capture, camera_id: Some(id) } => {
                if shared.rig.camera(id).is_none() {
                    Some(ControlMessage::Error { code: ERR_PROTOCOL, text: format!("camera {id} is not in the calibration") })
                } else {
                    peer = Peer::Capture(id);
                    shared.liveness.lock().unwrap().touch(id, received);
                    shared.nodes.lock().unwrap().insert(id, writer.clone());
                    let _ = shared.events.send(Event::CameraHello(id));
                    info!(camera = id, conn, "capture node connected");
                    let on = shared.requested.lock().unwrap().get(&id).copied();
                    on.map(|on| subscription_message(id, on))
                }
            }
            ControlMessage::Hello { role: PeerRole::Capture, camera_id: None } => {
                Some(ControlMessage::Error { code: ERR_PROTOCOL, text: "capture hello needs a camera_id".into() })
            }
            ControlMessage::Hello { role: PeerRole::Viewer, .. } => match claim_viewer(&shared, &writer, received) {
                true => {
                    peer = Peer::Viewer;
                    None
                }
                false => Some(slot_taken()),
            },
            ControlMessage::ClockProbe { t1 } => {
                Some(ControlMessage::ClockReply { t1, t2: received.0, t3: shared.clock.now().0 })
            }
            ControlMessage::Viewpoint { pose, intrinsics, .. } => {
                if !claim_viewer(&shared, &writer, received) {
                    Some(slot_taken())
                } else {
                    peer = Peer::Viewer;
                    match viewpoint_camera(&pose, &intrinsics) {
                        Ok(cam) => {
                            let _ = shared.events.send(Event::Viewpoint(cam));
                            None
                        }
                        Err(e) => Some(ControlMessage::Error { code: ERR_BAD_VIEWPOINT, text: e.to_string() }),
                    }
                }
            }
            ControlMessage::Subscribe { camera_ids } | ControlMessage::Unsubscribe { camera_ids } => {
                // Selection is server-driven; client requests are advisory.
                debug!(conn, ?camera_ids, "client subscription hint ignored");
                None
            }
            ControlMessage::Heartbeat { .. } => None,
            ControlMessage::StatsRequest => {
                let stats = shared.stats.lock().unwrap().clone();
                Some(ControlMessage::Stats { stats: serde_json::to_value(stats).expect("stats serialize") })
            }
            other => Some(ControlMessage::Error { code: ERR_PROTOCOL, text: format!("unexpected message {}", other.to_json()) }),
        };
        if let Some(r) = reply {
            if writer.send(&r).is_err() {
                break;
            }
        }
    }
    shared.controls.lock().unwrap().remove(&conn);
    match peer {
        Peer::Capture(id) => {
            let mut nodes = shared.nodes.lock().unwrap();
            if nodes.get(&id).is_some_and(|w| w.id == conn) {
                nodes.remove(&id);
            }
            info!(camera = id, "capture node control closed");
        }
        Peer::Viewer => release_viewer(&shared, conn),
        Peer::Unknown => {}
    }
}

fn slot_taken() -> ControlMessage {
    ControlMessage::Error { code: ERR_VIEWER_SLOT_TAKEN, text: "viewer slot taken".into() }
}

fn claim_viewer(shared: &Shared, writer: &ControlWriter, now: Timestamp) -> bool {
    let mut slot = shared.viewer.lock().unwrap();
    match slot.owner {
        Some(owner) => owner == writer.id,
        None => {
            slot.owner = Some(writer.id);
            slot.control = Some(writer.clone());
            slot.last_seen = now;
            info!(conn = writer.id, "viewer connected");
            true
        }
    }
}

fn release_viewer(shared: &Shared, conn: u64) {
    let mut slot = shared.viewer.lock().unwrap();
    if slot.owner == Some(conn) {
        slot.owner = None;
        slot.control = None;
        info!(conn, "viewer released");
    }
}

fn subscription_message(camera: CameraId, on: bool) -> ControlMessage {
    if on {
        ControlMessage::Subscribe { camera_ids: vec![camera] }
    } else {
        ControlMessage::Unsubscribe { camera_ids: vec![camera] }
    }
}

fn heartbeat_loop(shared: Arc<Shared>) {
    let mut last = Instant::now() - Duration::from_secs(2);
    while !shared.stopping() {
        thread::sleep(Duration::from_millis(20));
        let now = shared.clock.now();
        {
            let mut slot = shared.viewer.lock().unwrap();
            if let Some(owner) = slot.owner {
                if now.0.saturating_sub(slot.last_seen.0) > PEER_TIMEOUT_US {
                    warn!(conn = owner, "viewer timed out");
                    if let Some(s) = shared.streams.lock().unwrap().get(&owner) {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                    slot.owner = None;
                    slot.control = None;
                }
            }
        }
        if last.elapsed() < Duration::from_micros(HEARTBEAT_INTERVAL_US) {
            continue;
        }
        last = Instant::now();
        let writers: Vec<ControlWriter> = shared.controls.lock().unwrap().values().cloned().collect();
        for w in writers {
            let _ = w.send(&ControlMessage::Heartbeat { ts: now.0 });
        }
    }
}

struct PipelineLoop {
    shared: Arc<Shared>,
    config: ServerConfig,
    pipeline: Pipeline,
    assembler: Assembler<Ingested>,
    receivers: BTreeMap<CameraId, Receiver<IngestEvent>>,
    events: Receiver<Event>,
}

impl PipelineLoop {
    fn new(
        shared: Arc<Shared>,
        config: ServerConfig,
        pipeline: Pipeline,
        receivers: BTreeMap<CameraId, Receiver<IngestEvent>>,
        events: Receiver<Event>,
    ) -> Self {
        let assembler = Assembler::new(config.assembler()).expect("validated at startup");
        Self { shared, config, pipeline, assembler, receivers, events }
    }

    fn run(&mut self) {
        while !self.shared.stopping() {
            self.handle_events();
            self.check_liveness();
            let now = self.assembler.next_tick().unwrap_or_else(|| self.shared.clock.now());
            self.pipeline.prepare_tick(now);
            self.publish_subscriptions();
            let required = self.pipeline.required();
            if required.is_empty() {
                self.wait_events(POLL_INTERVAL);
                continue;
            }
            self.drain(&required);
            let started = Instant::now();
            let polled = self.assembler.poll(&required);
            match polled {
                Ok(Poll::Ready(set)) => self.finish_tick(set, &required, started),
                Ok(Poll::Pending(waiting)) => {
                    if self.config.mode == RunMode::Realtime && self.deadline_passed() {
                        match self.assembler.force(&required) {
                            Ok(Poll::Ready(set)) => self.finish_tick(set, &required, started),
                            Ok(_) => {}
                            Err(e) => self.on_sync_error(e),
                        }
                    } else {
                        self.wait_for(&waiting);
                    }
                }
                Ok(Poll::Exhausted) => self.wait_events(POLL_INTERVAL),
                Err(e) => self.on_sync_error(e),
            }
        }
    }

    fn deadline_passed(&self) -> bool {
        match self.assembler.next_tick() {
            Some(t) => self.shared.clock.now() >= t.saturating_add(self.config.tolerance_us + DEADLINE_MARGIN_US),
            None => false,
        }
    }

    fn finish_tick(&mut self, set: fvv_core::FrameSet<Ingested>, required: &[CameraId], started: Instant) {
        if let Some(next) = self.assembler.next_tick() {
            self.assembler.retire_before(next.saturating_sub(self.config.tolerance_us), required);
        }
        let assembly = started.elapsed();
        let out = match self.pipeline.process(&set, assembly) {
            Ok(out) => out,
            Err(e) => {
                warn!(error = %e, tick = set.tick_ts.0, "synthesis failed");
                None
            }
        };
        if self.config.mode == RunMode::Realtime {
            self.drop_late_ticks();
        }
        let stats = self.pipeline.stats().clone();
        debug!(
            tick = set.tick_ts.0,
            frames = stats.frames_synthesized,
            assembly_us = stats.last.assembly_us,
            warp_us = stats.last.warp_us,
            blend_us = stats.last.blend_us,
            composite_us = stats.last.composite_us,
            encode_us = stats.last.encode_us,
            "tick"
        );
        // Published before the frame leaves so a viewer never sees a frame
        // the stats do not count yet.
        *self.shared.stats.lock().unwrap() = stats;
        if let Some(out) = out {
            self.emit(out);
        }
    }

    /// Skips ticks whose deadline passed while synthesizing.
    fn drop_late_ticks(&mut self) {
        let Some(next) = self.assembler.next_tick() else { return };
        let now = self.shared.clock.now();
        let slack = self.config.tolerance_us + DEADLINE_MARGIN_US;
        if now.0 > next.0 + slack + self.config.period_us {
            let target = Timestamp(now.0 - slack);
            self.assembler.skip_to(target);
            let skipped = (self.assembler.next_tick().unwrap().0 - next.0) / self.config.period_us;
            self.pipeline.stats_mut().dropped_ticks += skipped;
        }
    }

    fn emit(&mut self, out: TickOutput) {
        let (control, media) = {
            let slot = self.shared.viewer.lock().unwrap();
            (slot.control.clone(), slot.media.clone())
        };
        if let Some((conn, media)) = media {
            let mut w = media.lock().unwrap();
            if write_media(&mut *w, &out.frame).and_then(|_| w.flush().map_err(TransportError::from)).is_err() {
                drop(w);
                let mut slot = self.shared.viewer.lock().unwrap();
                if slot.media.as_ref().is_some_and(|(id, _)| *id == conn) {
                    slot.media = None;
                }
            }
        }
        if let (Some(report), Some(control)) = (&out.report, control) {
            let _ = control.send(report);
        }
    }

    fn on_sync_error(&mut self, e: SyncError) {
        match e {
            SyncError::StreamLost { camera, staleness } => {
                warn!(camera, staleness, "stream lost");
                self.lose(camera);
            }
            other => warn!(error = %other, "assembly error"),
        }
    }

    fn lose(&mut self, camera: CameraId) {
        if self.pipeline.mark_lost(camera) {
            self.assembler.remove(camera);
            self.shared.lost.lock().unwrap().insert(camera);
            *self.shared.stats.lock().unwrap() = self.pipeline.stats().clone();
        }
    }

    fn handle_events(&mut self) {
        while let Ok(ev) = self.events.try_recv() {
            self.apply_event(ev);
        }
    }

    fn apply_event(&mut self, ev: Event) {
        match ev {
            Event::Viewpoint(cam) => self.pipeline.set_viewpoint(cam),
            Event::CameraHello(id) => {
                if self.pipeline.lost().contains(&id) {
                    info!(camera = id, "camera back");
                    self.pipeline.restore(id);
                    self.shared.lost.lock().unwrap().remove(&id);
                }
            }
        }
    }

    fn check_liveness(&mut self) {
        let now = self.shared.clock.now();
        let expired = self.shared.liveness.lock().unwrap().expire(now);
        for camera in expired {
            warn!(camera, "camera silent for too long");
            self.lose(camera);
        }
    }

    /// Sends Subscribe/Unsubscribe to nodes whose state changed and updates
    /// the set of payloads the sockets decode.
    fn publish_subscriptions(&mut self) {
        let decode = self.pipeline.decode_set();
        let changed = *self.shared.decode_set.read().unwrap() != decode;
        if !changed {
            return;
        }
        *self.shared.decode_set.write().unwrap() = decode.clone();
        let mut requested = self.shared.requested.lock().unwrap();
        let nodes = self.shared.nodes.lock().unwrap();
        for cam in self.shared.rig.cameras() {
            let on = decode.as_ref().is_none_or(|s| s.contains(&cam.id));
            if requested.get(&cam.id) != Some(&on) {
                requested.insert(cam.id, on);
                if let Some(w) = nodes.get(&cam.id) {
                    let _ = w.send(&subscription_message(cam.id, on));
                }
            }
        }
    }

    fn apply_ingest(&mut self, camera: CameraId, ev: IngestEvent) {
        if self.pipeline.lost().contains(&camera) {
            return;
        }
        match ev {
            IngestEvent::Frame(ts, frame) => {
                if let Err(e) = self.assembler.push(camera, ts, frame) {
                    warn!(camera, error = %e, "frame rejected");
                }
            }
            IngestEvent::Closed => self.assembler.close(camera),
        }
    }

    /// Pulls whatever is already queued without blocking. Each camera is
    /// pulled only until it covers the next tick so fast producers stay
    /// paced by their channel.
    fn drain(&mut self, required: &[CameraId]) {
        let ids: Vec<CameraId> = self.receivers.keys().copied().collect();
        for id in ids {
            loop {
                let covered = match (self.assembler.next_tick(), self.assembler.horizon(id)) {
                    (Some(t), Some(h)) => h > t.saturating_add(self.config.tolerance_us),
                    (None, Some(_)) => !required.contains(&id) || self.assembler.queued(id) > 0,
                    (_, None) => false,
                };
                if covered && self.config.mode == RunMode::Lockstep {
                    break;
                }
                match self.receivers[&id].try_recv() {
                    Ok(ev) => self.apply_ingest(id, ev),
                    Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
                }
            }
        }
    }

    fn wait_for(&mut self, waiting: &[CameraId]) {
        let mut sel = Select::new();
        let mut order = Vec::new();
        for id in waiting {
            if let Some(rx) = self.receivers.get(id) {
                sel.recv(rx);
                order.push(*id);
            }
        }
        let events_idx = sel.recv(&self.events);
        let timeout = match (self.config.mode, self.assembler.next_tick()) {
            (RunMode::Realtime, Some(t)) => {
                let deadline = t.saturating_add(self.config.tolerance_us + DEADLINE_MARGIN_US);
                Duration::from_micros(deadline.0.saturating_sub(self.shared.clock.now().0)).min(POLL_INTERVAL)
            }
            _ => POLL_INTERVAL,
        };
        let Ok(op) = sel.select_timeout(timeout) else { return };
        let idx = op.index();
        if idx == events_idx {
            if let Ok(ev) = op.recv(&self.events) {
                self.apply_event(ev);
            }
            return;
        }
        let id = order[idx];
        if let Ok(ev) = op.recv(&self.receivers[&id]) {
            self.apply_ingest(id, ev);
        }
    }

    fn wait_events(&mut self, timeout: Duration) {
        match self.events.recv_timeout(timeout) {
            Ok(ev) => self.apply_event(ev),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {}
        }
    }
}
