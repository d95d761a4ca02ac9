//! Binary (P5) PGM images.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A grayscale frame with `f32` intensities in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "{} values for a {height}x{width} frame",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("frame", "non-finite intensity"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Intensities rounded and clamped to `0..=255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM header near byte {start}")))
}

/// Decodes an 8-bit P5 image.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayFrame> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::Format("missing P5 magic".into()));
    }
    let mut pos = 2;
    let width = next_token(bytes, &mut pos)?;
    let height = next_token(bytes, &mut pos)?;
    let maxval = next_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("expected {n} raster bytes")))?;
    GrayFrame::from_u8(height, width, raster)
}

pub fn encode_pgm(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.to_u8());
    out
}

pub fn read_pgm(mut r: impl Read) -> Result<GrayFrame> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_pgm(&bytes)
}

pub fn write_pgm(frame: &GrayFrame, mut w: impl Write) -> Result<()> {
    w.write_all(&encode_pgm(frame))?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayFrame> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn save_pgm(frame: &GrayFrame, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(frame))?;
    Ok(())
}
