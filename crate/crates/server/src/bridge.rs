//! WebSocket bridge for browser viewers. Each WebSocket is relayed to the
//! server's own TCP control and media ports: control messages travel as JSON
//! text frames, media messages as binary frames in the wire format.
//!
//! Paths: `/control` relays control only, `/media` media only, and `/`
//! both over one socket.

use std::cell::Cell;
use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::rc::Rc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use fvv_core::transport::{
    encode_media, read_control, read_media, write_control, write_media, ControlMessage, MediaMessage, ERR_PROTOCOL,
};
use tracing::{debug, info, warn};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::{Message, WebSocket};

const READ_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channels {
    Control,
    Media,
    Both,
}

impl Channels {
    fn from_path(path: &str) -> Option<Self> {
        match path.trim_end_matches('/') {
            "" => Some(Self::Both),
            "/control" => Some(Self::Control),
            "/media" => Some(Self::Media),
            _ => None,
        }
    }

    fn control(self) -> bool {
        self != Self::Media
    }

    fn media(self) -> bool {
        self != Self::Control
    }
}

enum Outgoing {
    Text(String),
    Binary(Vec<u8>),
    Closed,
}

pub(crate) fn accept_loop(listener: TcpListener, control: SocketAddr, media: SocketAddr, stopping: impl Fn() -> bool + Sync) {
    let stopping = &stopping;
    thread::scope(|scope| {
        while !stopping() {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    debug!(%peer, "bridge connection");
                    scope.spawn(move || {
                        if let Err(e) = serve(stream, control, media, stopping) {
                            debug!(%peer, error = %e, "bridge connection ended");
                        }
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!(error = %e, "bridge accept failed");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    });
}

#[allow(clippy::result_large_err)]
fn serve(
    stream: TcpStream,
    control_addr: SocketAddr,
    media_addr: SocketAddr,
    stopping: &(dyn Fn() -> bool + Sync),
) -> Result<(), Box<dyn std::error::Error>> {
    let chosen = Rc::new(Cell::new(None));
    let slot = chosen.clone();
    let callback = move |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        match Channels::from_path(req.uri().path()) {
            Some(c) => {
                slot.set(Some(c));
                Ok(resp)
            }
            None => {
                let mut err = ErrorResponse::new(Some(format!("unknown path {}", req.uri().path())));
                *err.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
                Err(err)
            }
        }
    };
    let mut ws = tungstenite::accept_hdr(stream, callback)?;
    let channels = chosen.get().expect("set by a successful handshake");
    info!(?channels, "bridge viewer connected");

    let (tx, rx) = unbounded();
    let mut control = None;
    let mut upstream = Vec::new();
    if channels.control() {
        let s = TcpStream::connect(control_addr)?;
        s.set_nodelay(true)?;
        upstream.push(s.try_clone()?);
        spawn_control_reader(s.try_clone()?, tx.clone());
        control = Some(BufWriter::new(s));
    }
    if channels.media() {
        let s = TcpStream::connect(media_addr)?;
        s.set_nodelay(true)?;
        let mut w = BufWriter::new(s.try_clone()?);
        write_media(&mut w, &MediaMessage::viewer_hello())?;
        w.flush()?;
        upstream.push(s.try_clone()?);
        spawn_media_reader(s, tx.clone());
    }
    drop(tx);

    let result = relay(&mut ws, &mut control, &rx, stopping);
    for s in upstream {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    info!("bridge viewer disconnected");
    result
}

fn relay(
    ws: &mut WebSocket<TcpStream>,
    control: &mut Option<BufWriter<TcpStream>>,
    rx: &Receiver<Outgoing>,
    stopping: &dyn Fn() -> bool,
) -> Result<(), Box<dyn std::error::Error>> {
    ws.get_ref().set_read_timeout(Some(READ_POLL))?;
    while !stopping() {
        loop {
            match rx.try_recv() {
                Ok(Outgoing::Text(t)) => ws.send(Message::text(t))?,
                Ok(Outgoing::Binary(b)) => ws.send(Message::binary(b))?,
                Ok(Outgoing::Closed) => return Ok(()),
                Err(_) => break,
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let Some(w) = control.as_mut() else {
                    ws.send(protocol_error("this socket carries media only"))?;
                    continue;
                };
                match ControlMessage::from_json(text.as_str()) {
                    Ok(msg) => {
                        write_control(w, &msg)?;
                    }
                    Err(e) => ws.send(protocol_error(&e.to_string()))?,
                }
            }
            Ok(Message::Binary(_)) => ws.send(protocol_error("binary frames are server to viewer only"))?,
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn protocol_error(text: &str) -> Message {
    Message::text(ControlMessage::Error { code: ERR_PROTOCOL, text: text.into() }.to_json())
}

fn spawn_control_reader(stream: TcpStream, tx: Sender<Outgoing>) {
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        while let Ok(Some(msg)) = read_control(&mut r) {
            if tx.send(Outgoing::Text(msg.to_json())).is_err() {
                return;
            }
        }
        let _ = tx.send(Outgoing::Closed);
    });
}

fn spawn_media_reader(stream: TcpStream, tx: Sender<Outgoing>) {
    thread::spawn(move || {
        let mut r = BufReader::with_capacity(1 << 16, stream);
        while let Ok(Some(msg)) = read_media(&mut r) {
            if tx.send(Outgoing::Binary(encode_media(&msg))).is_err() {
                return;
            }
        }
        let _ = tx.send(Outgoing::Closed);
    });
}
