//! Wire formats.
//!
//! Media messages carry one plane set (color, packed depth or mask) behind a
//! 26-byte little-endian header:
//!
//! ```text
//! off  size  field
//!   0     4  magic "FVVM"
//!   4     1  version (1)
//!   5     1  msg_type (1 color, 2 packed depth, 3 mask)
//!   6     2  camera_id (0xFFFF for the virtual camera)
//!   8     8  capture_ts, µs
//!  16     2  width
//!  18     2  height
//!  20     2  flags (bit 0 DEFLATE payload, bit 1 PNG payload)
//!  22     4  payload_len
//!  26        payload
//! ```
//!
//! Control messages are JSON documents behind a u32 little-endian length.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_codec::PackedDepthFrame;
use crate::error::{CodecError, GeometryError};
use crate::frame::{i420_len, packed_mask_len, I420Frame, Mask};
use crate::geometry::{CameraId, CameraIntrinsics, CameraModel, CameraPose, VIRTUAL_CAMERA_ID};
use crate::sync::Timestamp;

pub const MEDIA_MAGIC: [u8; 4] = *b"FVVM";
pub const MEDIA_VERSION: u8 = 1;
pub const MEDIA_HEADER_LEN: usize = 26;
pub const FLAG_DEFLATE: u16 = 1;
pub const FLAG_PNG: u16 = 1 << 1;
const KNOWN_FLAGS: u16 = FLAG_DEFLATE | FLAG_PNG;
/// Upper bound on any payload; a 4K I420 frame is about 12 MiB.
pub const MAX_PAYLOAD_LEN: u32 = 64 << 20;
pub const MAX_CONTROL_LEN: u32 = 1 << 20;

pub const DEFAULT_MEDIA_PORT: u16 = 9500;
pub const DEFAULT_CONTROL_PORT: u16 = 9501;
pub const DEFAULT_BRIDGE_PORT: u16 = 9502;

/// `Error` control codes.
pub const ERR_VIEWER_SLOT_TAKEN: u16 = 1;
pub const ERR_BAD_VIEWPOINT: u16 = 2;
pub const ERR_PROTOCOL: u16 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionMismatch(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown flag bits {0:#06x}")]
    UnknownFlags(u16),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(u32),
    #[error("payload is {actual} bytes, {expected} expected for {width}x{height}")]
    PayloadSize { expected: usize, actual: usize, width: u16, height: u16 },
    #[error("decompression failed: {0}")]
    Decompression(String),
    #[error("invalid dimensions {width}x{height}")]
    Dimensions { width: u16, height: u16 },
    #[error("control message is not valid: {0}")]
    Control(String),
    #[error("control message of {0} bytes exceeds limit")]
    ControlTooLarge(u32),
    #[error("i/o: {0}")]
    Io(String),
}

impl TransportError {
    /// Stable numeric code, one per variant.
    pub fn code(&self) -> u16 {
        match self {
            TransportError::BadMagic(_) => 1,
            TransportError::VersionMismatch(_) => 2,
            TransportError::UnknownType(_) => 3,
            TransportError::UnknownFlags(_) => 4,
            TransportError::Truncated { .. } => 5,
            TransportError::PayloadTooLarge(_) => 6,
            TransportError::PayloadSize { .. } => 7,
            TransportError::Decompression(_) => 8,
            TransportError::Dimensions { .. } => 9,
            TransportError::Control(_) => 10,
            TransportError::ControlTooLarge(_) => 11,
            TransportError::Io(_) => 12,
        }
    }
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

impl From<CodecError> for TransportError {
    fn from(e: CodecError) -> Self {
        TransportError::Decompression(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MediaType {
    Color = 1,
    PackedDepth = 2,
    Mask = 3,
}

impl MediaType {
    pub fn from_u8(v: u8) -> Result<Self, TransportError> {
        match v {
            1 => Ok(MediaType::Color),
            2 => Ok(MediaType::PackedDepth),
            3 => Ok(MediaType::Mask),
            other => Err(TransportError::UnknownType(other)),
        }
    }

    /// Raw plane bytes for a `width`×`height` image.
    pub fn plane_len(self, width: u16, height: u16) -> usize {
        let (w, h) = (u32::from(width), u32::from(height));
        match self {
            MediaType::Color | MediaType::PackedDepth => i420_len(w, h),
            MediaType::Mask => packed_mask_len(w, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediaHeader {
    pub msg_type: MediaType,
    pub camera_id: CameraId,
    pub capture_ts: Timestamp,
    pub width: u16,
    pub height: u16,
    pub flags: u16,
    pub payload_len: u32,
}

impl MediaHeader {
    pub fn to_bytes(&self) -> [u8; MEDIA_HEADER_LEN] {
        let mut b = [0u8; MEDIA_HEADER_LEN];
        b[0..4].copy_from_slice(&MEDIA_MAGIC);
        b[4] = MEDIA_VERSION;
        b[5] = self.msg_type as u8;
        b[6..8].copy_from_slice(&self.camera_id.to_le_bytes());
        b[8..16].copy_from_slice(&self.capture_ts.0.to_le_bytes());
        b[16..18].copy_from_slice(&self.width.to_le_bytes());
        b[18..20].copy_from_slice(&self.height.to_le_bytes());
        b[20..22].copy_from_slice(&self.flags.to_le_bytes());
        b[22..26].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    /// Parses and validates a header without touching the payload.
    pub fn parse(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() >= 4 && bytes[0..4] != MEDIA_MAGIC {
            return Err(TransportError::BadMagic(bytes[0..4].try_into().unwrap()));
        }
        if bytes.len() < MEDIA_HEADER_LEN {
            return Err(TransportError::Truncated { needed: MEDIA_HEADER_LEN, available: bytes.len() });
        }
        if bytes[4] != MEDIA_VERSION {
            return Err(TransportError::VersionMismatch(bytes[4]));
        }
        let msg_type = MediaType::from_u8(bytes[5])?;
        let le16 = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let header = Self {
            msg_type,
            camera_id: le16(6),
            capture_ts: Timestamp(u64::from_le_bytes(bytes[8..16].try_into().unwrap())),
            width: le16(16),
            height: le16(18),
            flags: le16(20),
            payload_len: u32::from_le_bytes(bytes[22..26].try_into().unwrap()),
        };
        if header.flags & !KNOWN_FLAGS != 0 {
            return Err(TransportError::UnknownFlags(header.flags));
        }
        if header.payload_len > MAX_PAYLOAD_LEN {
            return Err(TransportError::PayloadTooLarge(header.payload_len));
        }
        let odd = !header.width.is_multiple_of(2) || !header.height.is_multiple_of(2);
        let empty = header.width == 0 || header.height == 0;
        // A zero-size message is the viewer's media-channel greeting.
        if odd || (empty && (header.width, header.height, header.payload_len) != (0, 0, 0)) {
            return Err(TransportError::Dimensions { width: header.width, height: header.height });
        }
        if header.flags & (FLAG_DEFLATE | FLAG_PNG) == 0 {
            let expected = msg_type.plane_len(header.width, header.height);
            if header.payload_len as usize != expected {
                return Err(TransportError::PayloadSize {
                    expected,
                    actual: header.payload_len as usize,
                    width: header.width,
                    height: header.height,
                });
            }
        }
        Ok(header)
    }

    pub fn message_len(&self) -> usize {
        MEDIA_HEADER_LEN + self.payload_len as usize
    }
}

/// A media message as it travels: the payload is kept exactly as sent,
/// compressed or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaMessage {
    pub msg_type: MediaType,
    pub camera_id: CameraId,
    pub capture_ts: Timestamp,
    pub width: u16,
    pub height: u16,
    pub flags: u16,
    pub payload: Vec<u8>,
}

fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = ZlibEncoder::new(Vec::with_capacity(bytes.len() / 2), Compression::fast());
    enc.write_all(bytes).expect("writing to memory");
    enc.finish().expect("writing to memory")
}

fn inflate(bytes: &[u8], expected: usize) -> Result<Vec<u8>, TransportError> {
    let mut out = Vec::with_capacity(expected);
    // Read one byte past the expected size to detect oversized streams.
    ZlibDecoder::new(bytes)
        .take(expected as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| TransportError::Decompression(e.to_string()))?;
    Ok(out)
}

fn dims(width: u32, height: u32) -> (u16, u16) {
    (u16::try_from(width).expect("width fits the wire format"), u16::try_from(height).expect("height fits the wire format"))
}

impl MediaMessage {
    fn raw(msg_type: MediaType, camera_id: CameraId, ts: Timestamp, width: u32, height: u32, planes: Vec<u8>, compress: bool) -> Self {
        let (width, height) = dims(width, height);
        let (flags, payload) = if compress { (FLAG_DEFLATE, deflate(&planes)) } else { (0, planes) };
        Self { msg_type, camera_id, capture_ts: ts, width, height, flags, payload }
    }

    pub fn color(camera_id: CameraId, ts: Timestamp, frame: &I420Frame, compress: bool) -> Self {
        Self::raw(MediaType::Color, camera_id, ts, frame.width(), frame.height(), frame.to_bytes(), compress)
    }

    pub fn depth(camera_id: CameraId, ts: Timestamp, frame: &PackedDepthFrame, compress: bool) -> Self {
        Self::raw(MediaType::PackedDepth, camera_id, ts, frame.width(), frame.height(), frame.to_bytes(), compress)
    }

    pub fn mask(camera_id: CameraId, ts: Timestamp, mask: &Mask, compress: bool) -> Self {
        Self::raw(MediaType::Mask, camera_id, ts, mask.width(), mask.height(), mask.to_packed(), compress)
    }

    /// A color message whose payload is a PNG image.
    pub fn png(camera_id: CameraId, ts: Timestamp, width: u32, height: u32, png: Vec<u8>) -> Self {
        let (width, height) = dims(width, height);
        Self { msg_type: MediaType::Color, camera_id, capture_ts: ts, width, height, flags: FLAG_PNG, payload: png }
    }

    /// Zero-size message a viewer sends to claim the media channel.
    pub fn viewer_hello() -> Self {
        Self {
            msg_type: MediaType::Color,
            camera_id: VIRTUAL_CAMERA_ID,
            capture_ts: Timestamp(0),
            width: 0,
            height: 0,
            flags: 0,
            payload: Vec::new(),
        }
    }

    pub fn header(&self) -> MediaHeader {
        MediaHeader {
            msg_type: self.msg_type,
            camera_id: self.camera_id,
            capture_ts: self.capture_ts,
            width: self.width,
            height: self.height,
            flags: self.flags,
            payload_len: u32::try_from(self.payload.len()).expect("payload fits u32"),
        }
    }

    pub fn is_compressed(&self) -> bool {
        self.flags & FLAG_DEFLATE != 0
    }

    pub fn is_png(&self) -> bool {
        self.flags & FLAG_PNG != 0
    }

    /// Uncompressed plane bytes, size-checked against the header.
    pub fn planes(&self) -> Result<Vec<u8>, TransportError> {
        let expected = self.msg_type.plane_len(self.width, self.height);
        if self.is_png() {
            return Ok(self.payload.clone());
        }
        let planes = if self.is_compressed() { inflate(&self.payload, expected)? } else { self.payload.clone() };
        if planes.len() != expected {
            return Err(TransportError::PayloadSize { expected, actual: planes.len(), width: self.width, height: self.height });
        }
        Ok(planes)
    }

    pub fn to_color(&self) -> Result<I420Frame, TransportError> {
        self.expect_type(MediaType::Color)?;
        Ok(I420Frame::from_bytes(u32::from(self.width), u32::from(self.height), &self.planes()?)?)
    }

    pub fn to_depth(&self) -> Result<PackedDepthFrame, TransportError> {
        self.expect_type(MediaType::PackedDepth)?;
        Ok(PackedDepthFrame::from_bytes(u32::from(self.width), u32::from(self.height), &self.planes()?)?)
    }

    pub fn to_mask(&self) -> Result<Mask, TransportError> {
        self.expect_type(MediaType::Mask)?;
        Ok(Mask::from_packed(u32::from(self.width), u32::from(self.height), &self.planes()?)?)
    }

    fn expect_type(&self, t: MediaType) -> Result<(), TransportError> {
        if self.msg_type != t || self.is_png() {
            return Err(TransportError::UnknownType(self.msg_type as u8));
        }
        Ok(())
    }
}

pub fn encode_media(msg: &MediaMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(MEDIA_HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&msg.header().to_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

fn from_parts(header: MediaHeader, payload: Vec<u8>) -> Result<MediaMessage, TransportError> {
    let msg = MediaMessage {
        msg_type: header.msg_type,
        camera_id: header.camera_id,
        capture_ts: header.capture_ts,
        width: header.width,
        height: header.height,
        flags: header.flags,
        payload,
    };
    if msg.is_compressed() && !msg.is_png() {
        msg.planes()?;
    }
    Ok(msg)
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode_media(bytes: &[u8]) -> Result<MediaMessage, TransportError> {
    let (msg, used) = decode_media_prefix(bytes)?;
    if used != bytes.len() {
        return Err(TransportError::PayloadSize {
            expected: used - MEDIA_HEADER_LEN,
            actual: bytes.len() - MEDIA_HEADER_LEN,
            width: msg.width,
            height: msg.height,
        });
    }
    Ok(msg)
}

/// Decodes the message at the start of `bytes`, returning it and the
/// number of bytes it occupied.
pub fn decode_media_prefix(bytes: &[u8]) -> Result<(MediaMessage, usize), TransportError> {
    let header = MediaHeader::parse(bytes)?;
    let total = header.message_len();
    if bytes.len() < total {
        return Err(TransportError::Truncated { needed: total, available: bytes.len() });
    }
    Ok((from_parts(header, bytes[MEDIA_HEADER_LEN..total].to_vec())?, total))
}

/// Incremental decoder for a media byte stream arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct MediaStreamDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl MediaStreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<MediaMessage>, TransportError> {
        let avail = &self.buf[self.start..];
        if avail.len() < MEDIA_HEADER_LEN {
            if avail.len() >= 4 && avail[0..4] != MEDIA_MAGIC {
                return Err(TransportError::BadMagic(avail[0..4].try_into().unwrap()));
            }
            return Ok(None);
        }
        let header = MediaHeader::parse(avail)?;
        if avail.len() < header.message_len() {
            return Ok(None);
        }
        let payload = avail[MEDIA_HEADER_LEN..header.message_len()].to_vec();
        self.start += header.message_len();
        if self.start > (1 << 20) && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        from_parts(header, payload).map(Some)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }
}

/// Reads one message from a blocking stream. Returns `None` on a clean end
/// of stream between messages.
pub fn read_media<R: Read>(r: &mut R) -> Result<Option<MediaMessage>, TransportError> {
    let Some(header) = read_media_header(r)? else { return Ok(None) };
    read_media_body(r, header).map(Some)
}

/// Reads the payload that follows an already-read header.
pub fn read_media_body<R: Read>(r: &mut R, header: MediaHeader) -> Result<MediaMessage, TransportError> {
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::Truncated { needed: header.message_len(), available: 0 },
        _ => e.into(),
    })?;
    from_parts(header, payload)
}

/// Reads only a header; the caller must consume or skip the payload.
pub fn read_media_header<R: Read>(r: &mut R) -> Result<Option<MediaHeader>, TransportError> {
    let mut head = [0u8; MEDIA_HEADER_LEN];
    let mut got = 0;
    while got < MEDIA_HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Truncated { needed: MEDIA_HEADER_LEN, available: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    MediaHeader::parse(&head).map(Some)
}

/// Discards `len` bytes from a stream.
pub fn skip_payload<R: Read>(r: &mut R, len: u32) -> Result<(), TransportError> {
    let copied = std::io::copy(&mut r.take(u64::from(len)), &mut std::io::sink())?;
    if copied != u64::from(len) {
        return Err(TransportError::Truncated { needed: len as usize, available: copied as usize });
    }
    Ok(())
}

pub fn write_media<W: Write>(w: &mut W, msg: &MediaMessage) -> Result<(), TransportError> {
    w.write_all(&msg.header().to_bytes())?;
    w.write_all(&msg.payload)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerRole {
    Capture,
    Viewer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    /// First message on a connection.
    Hello { role: PeerRole, camera_id: Option<CameraId> },
    ClockProbe { t1: u64 },
    ClockReply { t1: u64, t2: u64, t3: u64 },
    Subscribe { camera_ids: Vec<CameraId> },
    Unsubscribe { camera_ids: Vec<CameraId> },
    Viewpoint { pose: [f64; 12], intrinsics: [f64; 6], client_ts: u64 },
    SelectionReport { tick_ts: u64, active: Vec<CameraId>, subscribed: Vec<CameraId> },
    Heartbeat { ts: u64 },
    StatsRequest,
    Stats { stats: serde_json::Value },
    Error { code: u16, text: String },
}

impl ControlMessage {
    pub fn viewpoint(cam: &CameraModel, client_ts: u64) -> Self {
        ControlMessage::Viewpoint { pose: cam.pose.as_array(), intrinsics: cam.intrinsics.as_array(), client_ts }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("control messages serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TransportError> {
        serde_json::from_str(text).map_err(|e| TransportError::Control(e.to_string()))
    }
}

/// Virtual camera described by a `Viewpoint` message.
pub fn viewpoint_camera(pose: &[f64; 12], intrinsics: &[f64; 6]) -> Result<CameraModel, GeometryError> {
    Ok(CameraModel::new(VIRTUAL_CAMERA_ID, CameraIntrinsics::from_array(*intrinsics)?, CameraPose::from_array(*pose)?))
}

pub fn encode_control(msg: &ControlMessage) -> Vec<u8> {
    let json = msg.to_json();
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out
}

pub fn write_control<W: Write>(w: &mut W, msg: &ControlMessage) -> Result<(), TransportError> {
    w.write_all(&encode_control(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed control message; `None` on clean end of stream.
pub fn read_control<R: Read>(r: &mut R) -> Result<Option<ControlMessage>, TransportError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Truncated { needed: 4, available: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_CONTROL_LEN {
        return Err(TransportError::ControlTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let text = std::str::from_utf8(&body).map_err(|e| TransportError::Control(e.to_string()))?;
    ControlMessage::from_json(text).map(Some)
}
