//! Binary portable anymap files: P5 graymaps and P6 pixmaps, 8-bit only.

use std::path::Path;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            Kind::Gray => b"P5",
            Kind::Rgb => b"P6",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// Decoded raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "graymap size");
        Self { kind: Kind::Gray, width, height, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "pixmap size");
        Self { kind: Kind::Rgb, width, height, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(format!("\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }

    pub fn read(path: &Path, kind: Kind) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        decode(&bytes, kind).map_err(|(offset, message)| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        })
    }
}

/// Parses `bytes`; failures carry the byte offset where parsing stopped.
pub fn decode(bytes: &[u8], kind: Kind) -> std::result::Result<Image, (usize, String)> {
    if bytes.len() < 2 {
        return Err((bytes.len(), "truncated magic number".into()));
    }
    if &bytes[..2] != kind.magic() {
        return Err((0, format!("expected {}", String::from_utf8_lossy(kind.magic()))));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err((pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err((pos, "expected whitespace after maxval".into())),
        None => return Err((pos, "truncated header".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(kind.channels()))
        .ok_or((pos, "dimensions overflow".to_string()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err((bytes.len(), format!("raster truncated: {} of {need} bytes", raster.len())));
    }
    if raster.len() > need {
        return Err((pos + need, "trailing bytes after raster".into()));
    }
    Ok(Image {
        kind,
        width,
        height,
        data: raster.to_vec(),
    })
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, (usize, String)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err((*pos, format!("truncated header before {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err((start, format!("expected {what}")));
    }
    if *pos == bytes.len() {
        return Err((*pos, format!("truncated header after {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .ok_or((start, format!("bad {what}")))
}

/// Linear rescale of `values` to `0..=255`; a constant input maps to 0.
pub fn heatmap(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}
