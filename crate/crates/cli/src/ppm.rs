//! Colorized label maps as binary PPM (P6).

use std::path::Path;

use cxhg::{Error, Result};

/// Classes 0..6: impervious surfaces, building, low vegetation, tree, car,
/// clutter.
pub const PALETTE: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Color of `class`. Classes past the fixed palette get
/// `((37c) mod 256, (91c) mod 256, (157c) mod 256)`; the ignore index is
/// black.
pub fn color(class: u8) -> [u8; 3] {
    if let Some(c) = PALETTE.get(class as usize) {
        return *c;
    }
    if class == 255 {
        return [0, 0, 0];
    }
    let c = class as u32;
    [(37 * c % 256) as u8, (91 * c % 256) as u8, (157 * c % 256) as u8]
}

pub fn encode(width: usize, height: usize, labels: &[u8]) -> Vec<u8> {
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + labels.len() * 3);
    out.extend_from_slice(header.as_bytes());
    for &l in labels {
        out.extend_from_slice(&color(l));
    }
    out
}

pub fn write(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::Data(format!(
            "{} labels for a {width}x{height} image",
            labels.len()
        )));
    }
    std::fs::write(path, encode(width, height, labels)).map_err(|e| Error::io(path, e))
}

/// Pixels of a P6 file as RGB triples, with width and height.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, Vec<[u8; 3]>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos..)?;
    if data.len() != w * h * 3 {
        return None;
    }
    Some((w, h, data.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()))
}
