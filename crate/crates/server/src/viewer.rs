//! Native viewer client: the TCP counterpart of what a browser does through
//! the WebSocket bridge.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use fvv_core::transport::{read_control, read_media, write_control, write_media, ControlMessage, MediaMessage, PeerRole};
use fvv_core::CameraModel;

use crate::liveness::HEARTBEAT_INTERVAL_US;
use crate::ServerError;

#[derive(Debug, Clone)]
pub enum ViewerEvent {
    Frame(MediaMessage),
    Control(ControlMessage),
    /// One of the two connections closed.
    Closed,
}

pub struct ViewerClient {
    control: Arc<Mutex<BufWriter<TcpStream>>>,
    sockets: Vec<TcpStream>,
    events: Receiver<ViewerEvent>,
    done: Arc<AtomicBool>,
}

impl ViewerClient {
    /// Opens the control connection and says hello. Media is attached
    /// separately so a refused viewer can be observed without it.
    pub fn connect_control(control_addr: SocketAddr) -> Result<Self, ServerError> {
        let stream = TcpStream::connect(control_addr)?;
        stream.set_nodelay(true)?;
        let control = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
        write_control(&mut *control.lock().unwrap(), &ControlMessage::Hello { role: PeerRole::Viewer, camera_id: None })?;
        let (tx, rx) = unbounded();
        let mut reader = BufReader::new(stream.try_clone()?);
        thread::spawn(move || {
            while let Ok(Some(msg)) = read_control(&mut reader) {
                if tx.send(ViewerEvent::Control(msg)).is_err() {
                    return;
                }
            }
            let _ = tx.send(ViewerEvent::Closed);
        });
        let done = Arc::new(AtomicBool::new(false));
        let (w, d) = (control.clone(), done.clone());
        thread::spawn(move || {
            let start = Instant::now();
            let mut beats = 0u64;
            while !d.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(20));
                let due = start.elapsed().as_micros() as u64 / HEARTBEAT_INTERVAL_US;
                if due > beats {
                    beats = due;
                    let msg = ControlMessage::Heartbeat { ts: start.elapsed().as_micros() as u64 };
                    if write_control(&mut *w.lock().unwrap(), &msg).is_err() {
                        return;
                    }
                }
            }
        });
        Ok(Self { control, sockets: vec![stream], events: rx, done })
    }

    /// Control plus media, ready to receive synthesized frames.
    pub fn connect(control_addr: SocketAddr, media_addr: SocketAddr) -> Result<Self, ServerError> {
        let mut client = Self::connect_control(control_addr)?;
        client.attach_media(media_addr)?;
        Ok(client)
    }

    pub fn attach_media(&mut self, media_addr: SocketAddr) -> Result<(), ServerError> {
        let stream = TcpStream::connect(media_addr)?;
        stream.set_nodelay(true)?;
        let mut w = BufWriter::new(stream.try_clone()?);
        write_media(&mut w, &MediaMessage::viewer_hello())?;
        w.flush()?;
        let (tx, rx) = unbounded();
        let mut reader = BufReader::with_capacity(1 << 16, stream.try_clone()?);
        thread::spawn(move || {
            while let Ok(Some(msg)) = read_media(&mut reader) {
                if tx.send(ViewerEvent::Frame(msg)).is_err() {
                    return;
                }
            }
            let _ = tx.send(ViewerEvent::Closed);
        });
        // Merge media into the control event stream.
        let (merged_tx, merged_rx) = unbounded();
        let control_rx = std::mem::replace(&mut self.events, merged_rx);
        thread::spawn(move || {
            let mut sel = crossbeam_channel::Select::new();
            let c = sel.recv(&control_rx);
            let m = sel.recv(&rx);
            let mut open = 2;
            while open > 0 {
                let op = sel.select();
                let idx = op.index();
                let ev = if idx == c { op.recv(&control_rx) } else if idx == m { op.recv(&rx) } else { unreachable!() };
                match ev {
                    Ok(ev) => {
                        if merged_tx.send(ev).is_err() {
                            return;
                        }
                    }
                    Err(_) => {
                        open -= 1;
                        sel.remove(idx);
                    }
                }
            }
        });
        self.sockets.push(stream);
        Ok(())
    }

    pub fn send(&self, msg: &ControlMessage) -> Result<(), ServerError> {
        write_control(&mut *self.control.lock().unwrap(), msg)?;
        Ok(())
    }

    pub fn send_viewpoint(&self, camera: &CameraModel, client_ts: u64) -> Result<(), ServerError> {
        self.send(&ControlMessage::viewpoint(camera, client_ts))
    }

    pub fn request_stats(&self) -> Result<(), ServerError> {
        self.send(&ControlMessage::StatsRequest)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<ViewerEvent> {
        match self.events.recv_timeout(timeout) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    /// Waits for the first control message matching `pred`, discarding
    /// everything else.
    pub fn wait_control(&self, timeout: Duration, mut pred: impl FnMut(&ControlMessage) -> bool) -> Option<ControlMessage> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.checked_duration_since(Instant::now())?;
            match self.recv_timeout(left)? {
                ViewerEvent::Control(m) if pred(&m) => return Some(m),
                _ => {}
            }
        }
    }

    pub fn events(&self) -> &Receiver<ViewerEvent> {
        &self.events
    }

    pub fn close(&self) {
        self.done.store(true, Ordering::SeqCst);
        for s in &self.sockets {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ViewerClient {
    fn drop(&mut self) {
        self.close();
    }
}
