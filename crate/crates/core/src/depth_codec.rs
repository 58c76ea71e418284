//! Lossless transport of 12-bit depth in 4:2:0 planar frames.
//!
//! Each 2×2 cell of codes `d00 d01 / d10 d11` carries 48 bits, which fill
//! exactly the cell's four luma bytes and its one U and one V byte:
//!
//! ```text
//! Y[r][c]  = d[r][c] >> 4                 (8 MSBs, same position)
//! U        = (d00 & 0xF) << 4 | (d01 & 0xF)
//! V        = (d10 & 0xF) << 4 | (d11 & 0xF)
//! ```
//!
//! Keeping the MSBs in luma keeps the Y plane spatially smooth, which is what
//! a downstream lossless predictive codec compresses well.

use crate::error::CodecError;
use crate::frame::{check_even, dims_u16, i420_len, parse_pnm_header, DumpHeader, I420Frame, DUMP_HEADER_LEN};
use crate::geometry::{DepthQuantizer, MAX_DEPTH_CODE};

pub const DEPTH_MAGIC: [u8; 4] = *b"FVVD";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    codes: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, codes: Vec<u16>) -> Result<Self, CodecError> {
        check_even(width, height)?;
        let expected = width as usize * height as usize;
        if codes.len() != expected {
            return Err(CodecError::BufferSize { expected, actual: codes.len() });
        }
        if let Some(i) = codes.iter().position(|c| *c > MAX_DEPTH_CODE) {
            return Err(CodecError::CodeOutOfRange {
                x: (i % width as usize) as u32,
                y: (i / width as usize) as u32,
                code: codes[i],
            });
        }
        Ok(Self { width, height, codes })
    }

    pub fn filled(width: u32, height: u32, code: u16) -> Result<Self, CodecError> {
        Self::new(width, height, vec![code; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.codes[y as usize * self.width as usize + x as usize]
    }

    /// Sets a code; values above 4095 are clamped.
    pub fn set(&mut self, x: u32, y: u32, code: u16) {
        self.codes[y as usize * self.width as usize + x as usize] = code.min(MAX_DEPTH_CODE);
    }

    pub fn into_codes(self) -> Vec<u16> {
        self.codes
    }

    /// Depth in meters per pixel; invalid pixels map to `None`.
    pub fn to_meters(&self, q: &DepthQuantizer) -> Vec<Option<f64>> {
        self.codes.iter().map(|c| q.dequantize(*c)).collect()
    }

    /// Writes a 16-bit binary PGM (`P5`, maxval 4095).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, MAX_DEPTH_CODE).into_bytes();
        out.reserve(self.codes.len() * 2);
        for c in &self.codes {
            out.extend_from_slice(&c.to_be_bytes());
        }
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, CodecError> {
        let (fields, start) = parse_pnm_header(bytes, 4, "PGM")?;
        if fields[0] != "P5" {
            return Err(CodecError::Header { format: "PGM", reason: format!("unsupported magic {}", fields[0]) });
        }
        let parse = |s: &str| -> Result<u32, CodecError> {
            s.parse().map_err(|_| CodecError::Header { format: "PGM", reason: format!("bad number {s:?}") })
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if !(256..=65535).contains(&maxval) {
            return Err(CodecError::Header { format: "PGM", reason: format!("maxval {maxval} is not a 16-bit depth map") });
        }
        let n = width as usize * height as usize;
        let data = &bytes[start..];
        if data.len() < 2 * n {
            return Err(CodecError::Truncated { needed: start + 2 * n, available: bytes.len() });
        }
        let codes = data[..2 * n].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        Self::new(width, height, codes)
    }
}

/// A depth map rearranged into I420 planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDepthFrame(I420Frame);

impl PackedDepthFrame {
    pub fn from_planes(width: u32, height: u32, y: Vec<u8>, u: Vec<u8>, v: Vec<u8>) -> Result<Self, CodecError> {
        I420Frame::from_planes(width, height, y, u, v).map(Self)
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Result<Self, CodecError> {
        I420Frame::from_bytes(width, height, bytes).map(Self)
    }

    pub fn planes(&self) -> &I420Frame {
        &self.0
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    pub fn byte_len(&self) -> usize {
        self.0.byte_len()
    }
}

pub fn pack_depth(d: &DepthMap) -> PackedDepthFrame {
    let w = d.width as usize;
    let cw = w / 2;
    let ch = d.height as usize / 2;
    let mut y = vec![0u8; d.codes.len()];
    let mut u = vec![0u8; cw * ch];
    let mut v = vec![0u8; cw * ch];
    for (i, c) in d.codes.iter().enumerate() {
        y[i] = (c >> 4) as u8;
    }
    for row in 0..ch {
        let top = &d.codes[2 * row * w..(2 * row + 1) * w];
        let bottom = &d.codes[(2 * row + 1) * w..(2 * row + 2) * w];
        for col in 0..cw {
            let nib = |c: u16| (c & 0xF) as u8;
            u[row * cw + col] = nib(top[2 * col]) << 4 | nib(top[2 * col + 1]);
            v[row * cw + col] = nib(bottom[2 * col]) << 4 | nib(bottom[2 * col + 1]);
        }
    }
    PackedDepthFrame(I420Frame::from_planes(d.width, d.height, y, u, v).expect("plane sizes follow from even dimensions"))
}

/// Validating wrapper for raw code buffers.
pub fn pack_codes(width: u32, height: u32, codes: Vec<u16>) -> Result<PackedDepthFrame, CodecError> {
    Ok(pack_depth(&DepthMap::new(width, height, codes)?))
}

pub fn unpack_depth(f: &PackedDepthFrame) -> DepthMap {
    let planes = &f.0;
    let w = planes.width() as usize;
    let cw = w / 2;
    let mut codes: Vec<u16> = planes.y.iter().map(|b| u16::from(*b) << 4).collect();
    for row in 0..planes.height() as usize / 2 {
        for col in 0..cw {
            let u = u16::from(planes.u[row * cw + col]);
            let v = u16::from(planes.v[row * cw + col]);
            let top = 2 * row * w + 2 * col;
            let bottom = top + w;
            codes[top] |= u >> 4;
            codes[top + 1] |= u & 0xF;
            codes[bottom] |= v >> 4;
            codes[bottom + 1] |= v & 0xF;
        }
    }
    DepthMap { width: planes.width(), height: planes.height(), codes }
}

/// Serializes a packed frame as `FVVD` header followed by the Y, U, V planes.
pub fn write_depth_dump(frame: &PackedDepthFrame, frame_index: u32) -> Result<Vec<u8>, CodecError> {
    let (width, height) = dims_u16(frame.width(), frame.height())?;
    let header = DumpHeader { magic: DEPTH_MAGIC, width, height, frame_index, reserved: 0 };
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + frame.byte_len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&frame.to_bytes());
    Ok(out)
}

pub fn read_depth_dump(bytes: &[u8]) -> Result<(DumpHeader, PackedDepthFrame), CodecError> {
    let header = DumpHeader::parse(bytes, DEPTH_MAGIC)?;
    let (w, h) = (u32::from(header.width), u32::from(header.height));
    let len = i420_len(w, h);
    if bytes.len() < DUMP_HEADER_LEN + len {
        return Err(CodecError::Truncated { needed: DUMP_HEADER_LEN + len, available: bytes.len() });
    }
    let frame = PackedDepthFrame::from_bytes(w, h, &bytes[DUMP_HEADER_LEN..DUMP_HEADER_LEN + len])?;
    Ok((header, frame))
}
