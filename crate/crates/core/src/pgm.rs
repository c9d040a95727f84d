//! Binary PGM (P5, maxval 255) reader/writer for map previews and
//! bitmap softboxes.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Write a map in [0, 1] as 8-bit gray, pixel = round(255 * v).
pub fn write_map_pgm(path: &Path, map: &Tensor, width: usize, height: usize) -> Result<()> {
    if map.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_map_pgm",
            lhs: map.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_pgm(path, width, height, &pixels)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.get(..2) != Some(b"P5") {
        return Err(fmt(0, "bad magic, expected P5"));
    }
    // Header: three whitespace-separated fields after the magic.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fmt(pos, "expected integer header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(start, "unparseable header field"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fmt(pos, "maxval must be 255"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| fmt(bytes.len(), "truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

/// Load a P5 file as a binary g x g bitmap: pixel >= 128 becomes 1.
pub fn read_bitmap(path: &Path) -> Result<Tensor> {
    let (w, h, pixels) = read_pgm(path)?;
    let data = pixels
        .iter()
        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![h, w], data)
}
