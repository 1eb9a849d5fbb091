//! Map export for visual inspection.
//!
//! Depth: binary PGM (`P5`), maxval 65535, big-endian 16-bit samples holding
//! depth in millimeters (clamped to 65535; 0 = no return). Semantics: binary PPM
//! (`P6`), maxval 255, one RGB triple per pixel from [`semantic_palette`]; pixels
//! whose alpha is below 0.5 are written black.

use std::io::Write;
use std::path::Path;

use super::RenderOutput;
use crate::error::{OdgError, Result};

const PALETTE: [[u8; 3]; 16] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [153, 153, 153],
    [107, 142, 35],
    [0, 0, 142],
    [220, 20, 60],
    [0, 60, 100],
    [250, 170, 30],
    [102, 102, 156],
    [190, 153, 153],
    [152, 251, 152],
    [70, 130, 180],
    [255, 0, 0],
    [0, 80, 100],
    [119, 11, 32],
];

pub fn semantic_palette(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| OdgError::io(path, e))
}

pub fn write_depth_pgm(out: &RenderOutput, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n65535\n", out.width, out.height).into_bytes();
    for &d in &out.depth_norm {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn write_semantic_ppm(out: &RenderOutput, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", out.width, out.height).into_bytes();
    for pix in 0..out.width * out.height {
        let rgb = if out.alpha[pix] >= 0.5 && out.num_classes > 0 {
            semantic_palette(out.argmax_sem(pix))
        } else {
            [0, 0, 0]
        };
        bytes.extend_from_slice(&rgb);
    }
    write_bytes(path, &bytes)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(OdgError::data(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(OdgError::data(path, format!("expected {magic}, found {}", fields[0])));
    }
    let num = |i: usize| {
        fields[i]
            .parse::<usize>()
            .map_err(|_| OdgError::data(path, format!("bad header field {}", fields[i])))
    };
    Ok((num(1)?, num(2)?, num(3)?, &bytes[pos + 1..]))
}

/// Reads a 16-bit PGM and returns `(width, height, samples)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path).map_err(|e| OdgError::io(path, e))?;
    let (w, h, _, data) = parse_header(&bytes, "P5", path)?;
    if data.len() != 2 * w * h {
        return Err(OdgError::data(path, "pixel data length mismatch"));
    }
    Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bytes = std::fs::read(path).map_err(|e| OdgError::io(path, e))?;
    let (w, h, _, data) = parse_header(&bytes, "P6", path)?;
    if data.len() != 3 * w * h {
        return Err(OdgError::data(path, "pixel data length mismatch"));
    }
    Ok((w, h, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}
