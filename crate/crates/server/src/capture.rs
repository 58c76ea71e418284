//! Simulated capture node: renders a synthetic scene for one camera and
//! streams color, foreground depth and mask to the server.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use fvv_core::scene_sim::{render, Scene};
use fvv_core::sync::{best_estimate, estimate_offset, ClockEstimate, ClockModel, TimedFrame};
use fvv_core::transport::{read_control, write_control, write_media, ControlMessage, MediaMessage, PeerRole};
use fvv_core::{CameraModel, DepthQuantizer, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::{debug, info, warn};

use crate::clock::SharedClock;
use crate::liveness::HEARTBEAT_INTERVAL_US;
use crate::ServerError;

const CLOCK_PROBES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Capture instants follow the wall clock.
    Realtime,
    /// Capture instants are simulated; the server's backpressure sets the
    /// pace.
    Fast,
}

#[derive(Clone)]
pub struct CaptureConfig {
    pub camera: CameraModel,
    pub quantizer: DepthQuantizer,
    pub scene: Scene,
    pub media_addr: SocketAddr,
    pub control_addr: SocketAddr,
    /// Frames to send; `None` streams until stopped.
    pub frames: Option<u64>,
    pub period_us: u64,
    /// First capture instant in true time. Defaults to the next grid point
    /// of a one-second-aligned block so independently started nodes agree.
    pub start: Option<Timestamp>,
    /// Uniform capture jitter in ±µs.
    pub jitter_us: u64,
    /// Probability that a frame is never sent.
    pub loss: f64,
    pub seed: u64,
    pub compress: bool,
    pub pacing: Pacing,
    /// This node's clock relative to true time.
    pub local_clock: ClockModel,
}

impl CaptureConfig {
    pub fn new(camera: CameraModel, quantizer: DepthQuantizer, scene: Scene, media: SocketAddr, control: SocketAddr) -> Self {
        Self {
            camera,
            quantizer,
            scene,
            media_addr: media,
            control_addr: control,
            frames: None,
            period_us: fvv_core::sync::DEFAULT_PERIOD_US,
            start: None,
            jitter_us: 0,
            loss: 0.0,
            seed: 0,
            compress: false,
            pacing: Pacing::Fast,
            local_clock: ClockModel::perfect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureReport {
    pub frames_sent: u64,
    pub frames_lost: u64,
    pub offset: Option<ClockEstimate>,
    /// Subscription changes received, `true` for subscribe.
    pub subscriptions: Vec<bool>,
}

pub struct CaptureNode {
    stop: Arc<AtomicBool>,
    sockets: Arc<Mutex<Vec<TcpStream>>>,
    handle: JoinHandle<Result<CaptureReport, ServerError>>,
}

impl CaptureNode {
    pub fn spawn(config: CaptureConfig, clock: SharedClock) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let sockets = Arc::new(Mutex::new(Vec::new()));
        let (s, k) = (stop.clone(), sockets.clone());
        let handle = thread::Builder::new()
            .name(format!("capture-{}", config.camera.id))
            .spawn(move || run(&config, clock, &s, &k))
            .expect("thread spawn");
        Self { stop, sockets, handle }
    }

    /// Drops both connections at once, as a crashed node would.
    pub fn kill(&self) {
        self.stop.store(true, Ordering::SeqCst);
        for s in self.sockets.lock().unwrap().iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    pub fn join(self) -> Result<CaptureReport, ServerError> {
        self.handle.join().unwrap_or_else(|_| Err(ServerError::Startup("capture thread panicked".into())))
    }
}

/// Runs a node to completion on the calling thread.
pub fn run(
    config: &CaptureConfig,
    clock: SharedClock,
    stop: &AtomicBool,
    sockets: &Mutex<Vec<TcpStream>>,
) -> Result<CaptureReport, ServerError> {
    let id = config.camera.id;
    let control = TcpStream::connect(config.control_addr)?;
    control.set_nodelay(true)?;
    sockets.lock().unwrap().push(control.try_clone()?);
    let mut control_reader = BufReader::new(control.try_clone()?);
    let control_writer = Arc::new(Mutex::new(BufWriter::new(control.try_clone()?)));
    let local_now = || config.local_clock.local_time(clock.now());

    let mut estimates = Vec::with_capacity(CLOCK_PROBES);
    for _ in 0..CLOCK_PROBES {
        let t1 = local_now();
        write_control(&mut *control_writer.lock().unwrap(), &ControlMessage::ClockProbe { t1: t1.0 })?;
        loop {
            match read_control(&mut control_reader)? {
                Some(ControlMessage::ClockReply { t1: echo, t2, t3 }) if echo == t1.0 => {
                    let t4 = local_now();
                    if let Ok(e) = estimate_offset(t1, Timestamp(t2), Timestamp(t3), t4) {
                        estimates.push(e);
                    }
                    break;
                }
                Some(ControlMessage::Error { code, text }) => {
                    return Err(ServerError::Remote(format!("server error {code}: {text}")))
                }
                Some(_) => continue,
                None => return Err(ServerError::Protocol("server closed during clock exchange".into())),
            }
        }
    }
    let offset = best_estimate(&estimates);
    let offset_us = offset.map_or(0, |e| e.offset_us);
    info!(camera = id, offset_us, delay_us = offset.map(|e| e.delay_us), "clock synchronized");
    write_control(
        &mut *control_writer.lock().unwrap(),
        &ControlMessage::Hello { role: PeerRole::Capture, camera_id: Some(id) },
    )?;

    let subscriptions = Arc::new(Mutex::new(Vec::new()));
    let done = Arc::new(AtomicBool::new(false));
    let reader = {
        let subs = subscriptions.clone();
        thread::spawn(move || {
            while let Ok(Some(msg)) = read_control(&mut control_reader) {
                match msg {
                    ControlMessage::Subscribe { .. } => subs.lock().unwrap().push(true),
                    ControlMessage::Unsubscribe { .. } => subs.lock().unwrap().push(false),
                    ControlMessage::Error { code, text } => warn!(camera = id, code, %text, "server error"),
                    _ => {}
                }
            }
        })
    };
    let heartbeat = {
        let (w, done, clock) = (control_writer.clone(), done.clone(), clock.clone());
        let local = config.local_clock;
        thread::spawn(move || {
            // Paced by the shared clock so a simulated clock drives it too.
            let mut last = clock.now();
            while !done.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(20));
                let now = clock.now();
                if now.0.saturating_sub(last.0) >= HEARTBEAT_INTERVAL_US {
                    last = now;
                    let ts = local.local_time(now).offset_by(offset_us);
                    if write_control(&mut *w.lock().unwrap(), &ControlMessage::Heartbeat { ts: ts.0 }).is_err() {
                        break;
                    }
                }
            }
        })
    };

    let result = stream_frames(config, &clock, offset_us, stop, sockets);
    done.store(true, Ordering::SeqCst);
    let _ = heartbeat.join();
    let _ = control.shutdown(Shutdown::Both);
    let _ = reader.join();
    let mut report = result?;
    report.offset = offset;
    report.subscriptions = std::mem::take(&mut *subscriptions.lock().unwrap());
    Ok(report)
}

fn stream_frames(
    config: &CaptureConfig,
    clock: &SharedClock,
    offset_us: i64,
    stop: &AtomicBool,
    sockets: &Mutex<Vec<TcpStream>>,
) -> Result<CaptureReport, ServerError> {
    let id = config.camera.id;
    let media = TcpStream::connect(config.media_addr)?;
    media.set_nodelay(true)?;
    sockets.lock().unwrap().push(media.try_clone()?);
    let mut out = BufWriter::with_capacity(1 << 16, media.try_clone()?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (u64::from(id) << 32));
    let start = config.start.unwrap_or_else(|| default_start(clock.now(), config.period_us, config.pacing));
    let mut report = CaptureReport::default();
    let mut k = 0u64;
    while config.frames.is_none_or(|n| k < n) && !stop.load(Ordering::SeqCst) {
        let nominal = start.0 + k * config.period_us;
        k += 1;
        let jitter = if config.jitter_us > 0 {
            rng.random_range(-(config.jitter_us as i64)..=config.jitter_us as i64)
        } else {
            0
        };
        let lost = config.loss > 0.0 && rng.random_bool(config.loss);
        let true_ts = Timestamp(nominal).offset_by(jitter);
        if config.pacing == Pacing::Realtime {
            let now = clock.now();
            if true_ts > now {
                thread::sleep(Duration::from_micros(true_ts.0 - now.0));
            }
        }
        if lost {
            report.frames_lost += 1;
            continue;
        }
        let view = render(&config.scene, &config.camera, true_ts, &config.quantizer);
        // Stamped by the local clock, then mapped onto the server clock.
        let stamped = config.local_clock.local_time(true_ts).offset_by(offset_us);
        let frame = TimedFrame::from_view(id, stamped, &view);
        let sent = write_media(&mut out, &MediaMessage::color(id, stamped, &frame.color, config.compress))
            .and_then(|_| write_media(&mut out, &MediaMessage::depth(id, stamped, &frame.foreground_depth, config.compress)))
            .and_then(|_| write_media(&mut out, &MediaMessage::mask(id, stamped, &frame.foreground_mask, config.compress)))
            .and_then(|_| out.flush().map_err(Into::into));
        if let Err(e) = sent {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            return Err(e.into());
        }
        report.frames_sent += 1;
        debug!(camera = id, ts = stamped.0, "frame sent");
    }
    let _ = out.flush();
    let _ = media.shutdown(Shutdown::Both);
    info!(camera = id, sent = report.frames_sent, lost = report.frames_lost, "capture finished");
    Ok(report)
}

fn default_start(now: Timestamp, period_us: u64, pacing: Pacing) -> Timestamp {
    match pacing {
        Pacing::Realtime => Timestamp(now.0.div_ceil(period_us) * period_us),
        Pacing::Fast => {
            let block = period_us * 30;
            Timestamp(now.0 / block * block)
        }
    }
}
