//! Planar I420 images, 1 bpp masks and their file formats.

use std::io::{Read, Write};

use crate::error::CodecError;

/// Planar 4:2:0 image: full-resolution Y followed by quarter-resolution U and
/// V planes. Dimensions are always even.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct I420Frame {
    width: u32,
    height: u32,
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

pub(crate) fn check_even(width: u32, height: u32) -> Result<(), CodecError> {
    if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(CodecError::OddDimensions { width, height });
    }
    Ok(())
}

/// Byte length of a `width`×`height` I420 image.
pub fn i420_len(width: u32, height: u32) -> usize {
    let luma = width as usize * height as usize;
    luma + luma / 2
}

impl I420Frame {
    pub fn filled(width: u32, height: u32, y: u8, u: u8, v: u8) -> Result<Self, CodecError> {
        check_even(width, height)?;
        let luma = width as usize * height as usize;
        Ok(Self { width, height, y: vec![y; luma], u: vec![u; luma / 4], v: vec![v; luma / 4] })
    }

    pub fn black(width: u32, height: u32) -> Result<Self, CodecError> {
        Self::filled(width, height, 0, 128, 128)
    }

    pub fn from_planes(width: u32, height: u32, y: Vec<u8>, u: Vec<u8>, v: Vec<u8>) -> Result<Self, CodecError> {
        check_even(width, height)?;
        let luma = width as usize * height as usize;
        for (plane, len, expected) in [("Y", y.len(), luma), ("U", u.len(), luma / 4), ("V", v.len(), luma / 4)] {
            if len != expected {
                return Err(CodecError::PlaneSize { plane, expected, actual: len });
            }
        }
        Ok(Self { width, height, y, u, v })
    }

    /// Parses the concatenated Y, U, V planes.
    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Result<Self, CodecError> {
        check_even(width, height)?;
        let expected = i420_len(width, height);
        if bytes.len() != expected {
            return Err(CodecError::PlaneSize { plane: "I420", expected, actual: bytes.len() });
        }
        let luma = width as usize * height as usize;
        let (y, chroma) = bytes.split_at(luma);
        let (u, v) = chroma.split_at(luma / 4);
        Ok(Self { width, height, y: y.to_vec(), u: u.to_vec(), v: v.to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.y);
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.v);
        out
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn chroma_width(&self) -> u32 {
        self.width / 2
    }

    pub fn chroma_height(&self) -> u32 {
        self.height / 2
    }

    pub fn byte_len(&self) -> usize {
        i420_len(self.width, self.height)
    }

    /// Builds an I420 frame from interleaved 8-bit RGB using full-range
    /// BT.601. Chroma is the average of the four pixels of each cell.
    pub fn from_rgb(width: u32, height: u32, rgb: &[u8]) -> Result<Self, CodecError> {
        check_even(width, height)?;
        let (w, h) = (width as usize, height as usize);
        if rgb.len() != w * h * 3 {
            return Err(CodecError::BufferSize { expected: w * h * 3, actual: rgb.len() });
        }
        let mut y = vec![0u8; w * h];
        for (dst, px) in y.iter_mut().zip(rgb.chunks_exact(3)) {
            *dst = rgb_to_yuv(px[0], px[1], px[2]).0;
        }
        let mut u = vec![0u8; w * h / 4];
        let mut v = vec![0u8; w * h / 4];
        for cy in 0..h / 2 {
            for cx in 0..w / 2 {
                let (mut su, mut sv) = (0.0, 0.0);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = ((2 * cy + dy) * w + 2 * cx + dx) * 3;
                    let (_, pu, pv) = rgb_to_yuv_f(rgb[i], rgb[i + 1], rgb[i + 2]);
                    su += pu;
                    sv += pv;
                }
                u[cy * (w / 2) + cx] = clamp_u8(su / 4.0);
                v[cy * (w / 2) + cx] = clamp_u8(sv / 4.0);
            }
        }
        Ok(Self { width, height, y, u, v })
    }

    pub fn to_rgb(&self) -> Vec<u8> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out = vec![0u8; w * h * 3];
        for row in 0..h {
            for col in 0..w {
                let c = (row / 2) * (w / 2) + col / 2;
                let (r, g, b) = yuv_to_rgb(self.y[row * w + col], self.u[c], self.v[c]);
                let o = (row * w + col) * 3;
                out[o] = r;
                out[o + 1] = g;
                out[o + 2] = b;
            }
        }
        out
    }
}

fn clamp_u8(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

fn rgb_to_yuv_f(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    (
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    )
}

pub fn rgb_to_yuv(r: u8, g: u8, b: u8) -> (u8, u8, u8) {
    let (y, u, v) = rgb_to_yuv_f(r, g, b);
    (clamp_u8(y), clamp_u8(u), clamp_u8(v))
}

pub fn yuv_to_rgb(y: u8, u: u8, v: u8) -> (u8, u8, u8) {
    let (y, u, v) = (f64::from(y), f64::from(u) - 128.0, f64::from(v) - 128.0);
    (clamp_u8(y + 1.402 * v), clamp_u8(y - 0.344_136 * u - 0.714_136 * v), clamp_u8(y + 1.772 * u))
}

/// Binary per-pixel mask (foreground membership).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

/// Byte length of a packed mask: rows padded to whole bytes, MSB first.
pub fn packed_mask_len(width: u32, height: u32) -> usize {
    (width as usize).div_ceil(8) * height as usize
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, CodecError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(CodecError::BufferSize { expected, actual: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_packed(&self) -> Vec<u8> {
        let stride = (self.width as usize).div_ceil(8);
        let mut out = vec![0u8; stride * self.height as usize];
        for (row, bits) in self.bits.chunks_exact(self.width as usize).enumerate() {
            for (col, bit) in bits.iter().enumerate() {
                if *bit {
                    out[row * stride + col / 8] |= 0x80 >> (col % 8);
                }
            }
        }
        out
    }

    pub fn from_packed(width: u32, height: u32, packed: &[u8]) -> Result<Self, CodecError> {
        let expected = packed_mask_len(width, height);
        if packed.len() != expected {
            return Err(CodecError::PlaneSize { plane: "mask", expected, actual: packed.len() });
        }
        let stride = (width as usize).div_ceil(8);
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for row in 0..height as usize {
            for col in 0..width as usize {
                bits.push(packed[row * stride + col / 8] & (0x80 >> (col % 8)) != 0);
            }
        }
        Ok(Self { width, height, bits })
    }

    /// Writes a binary PBM (`P4`) image; set bits are black (1).
    pub fn write_pbm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P4\n{} {}\n", self.width, self.height)?;
        w.write_all(&self.to_packed())
    }

    pub fn read_pbm<R: Read>(mut r: R) -> Result<Self, CodecError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| CodecError::Header { format: "PBM", reason: e.to_string() })?;
        let (fields, data_start) = parse_pnm_header(&bytes, 3, "PBM")?;
        if fields[0] != "P4" {
            return Err(CodecError::Header { format: "PBM", reason: format!("unsupported magic {}", fields[0]) });
        }
        let width = parse_dim(&fields[1], "PBM")?;
        let height = parse_dim(&fields[2], "PBM")?;
        let data = &bytes[data_start..];
        let expected = packed_mask_len(width, height);
        if data.len() < expected {
            return Err(CodecError::Truncated { needed: expected, available: data.len() });
        }
        Self::from_packed(width, height, &data[..expected])
    }
}

fn parse_dim(s: &str, format: &'static str) -> Result<u32, CodecError> {
    s.parse().map_err(|_| CodecError::Header { format, reason: format!("bad dimension {s:?}") })
}

/// Splits a netpbm header into `count` whitespace-separated tokens, skipping
/// comments. Returns the tokens and the offset of the raster data.
pub(crate) fn parse_pnm_header(bytes: &[u8], count: usize, format: &'static str) -> Result<(Vec<String>, usize), CodecError> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(CodecError::Header { format, reason: "header ended early".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() {
        return Err(CodecError::Header { format, reason: "missing raster".into() });
    }
    Ok((fields, i + 1))
}

/// 16-byte little-endian header shared by the packed-depth (`FVVD`) and color
/// (`FVVC`) dump formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub magic: [u8; 4],
    pub width: u16,
    pub height: u16,
    pub frame_index: u32,
    pub reserved: u32,
}

pub const DUMP_HEADER_LEN: usize = 16;
pub const COLOR_MAGIC: [u8; 4] = *b"FVVC";

impl DumpHeader {
    pub fn to_bytes(&self) -> [u8; DUMP_HEADER_LEN] {
        let mut b = [0u8; DUMP_HEADER_LEN];
        b[0..4].copy_from_slice(&self.magic);
        b[4..6].copy_from_slice(&self.width.to_le_bytes());
        b[6..8].copy_from_slice(&self.height.to_le_bytes());
        b[8..12].copy_from_slice(&self.frame_index.to_le_bytes());
        b[12..16].copy_from_slice(&self.reserved.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8], expected_magic: [u8; 4]) -> Result<Self, CodecError> {
        if bytes.len() < DUMP_HEADER_LEN {
            return Err(CodecError::Truncated { needed: DUMP_HEADER_LEN, available: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != expected_magic {
            return Err(CodecError::BadMagic { expected: expected_magic, found: magic });
        }
        Ok(Self {
            magic,
            width: u16::from_le_bytes([bytes[4], bytes[5]]),
            height: u16::from_le_bytes([bytes[6], bytes[7]]),
            frame_index: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            reserved: u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        })
    }
}

pub(crate) fn dims_u16(width: u32, height: u32) -> Result<(u16, u16), CodecError> {
    match (u16::try_from(width), u16::try_from(height)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(CodecError::Header { format: "dump", reason: format!("{width}x{height} exceeds 16-bit dimensions") }),
    }
}

/// Serializes a color frame as `FVVC` header + I420 planes.
pub fn write_color_dump(frame: &I420Frame, frame_index: u32) -> Result<Vec<u8>, CodecError> {
    let (width, height) = dims_u16(frame.width, frame.height)?;
    let header = DumpHeader { magic: COLOR_MAGIC, width, height, frame_index, reserved: 0 };
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + frame.byte_len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&frame.to_bytes());
    Ok(out)
}

pub fn read_color_dump(bytes: &[u8]) -> Result<(DumpHeader, I420Frame), CodecError> {
    let header = DumpHeader::parse(bytes, COLOR_MAGIC)?;
    let len = i420_len(u32::from(header.width), u32::from(header.height));
    let body = &bytes[DUMP_HEADER_LEN..];
    if body.len() < len {
        return Err(CodecError::Truncated { needed: DUMP_HEADER_LEN + len, available: bytes.len() });
    }
    let frame = I420Frame::from_bytes(u32::from(header.width), u32::from(header.height), &body[..len])?;
    Ok((header, frame))
}
