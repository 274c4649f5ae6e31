//! Buffer dumps and raster inputs.
//!
//! * Silhouette: binary PGM (`P5`, maxval 255), 255 foreground, 0 background.
//! * Depth: binary PGM (`P5`, maxval 65535, big-endian samples). Background is
//!   0; foreground depth `d` is stored as `1 + round((d - min) / (max - min) * 65534)`.
//!   `min` and `max` live in a JSON sidecar next to the image with the
//!   extension replaced by `.json`. Without a sidecar the sample value itself is
//!   the depth and 0 still means no data.
//! * Normal: 8-bit RGB PNG, channel `round((n + 1) / 2 * 255)`, background black.
//! * Masks: any 8- or 16-bit PGM; nonzero samples are foreground.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::raster::RenderBuffers;

const DEPTH_LEVELS: f64 = 65534.0;

/// A decoded grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

fn pgm_header(width: usize, height: usize, maxval: u16) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn silhouette_pgm(buffers: &RenderBuffers) -> Vec<u8> {
    let mut out = pgm_header(buffers.width, buffers.height, 255);
    out.extend(buffers.silhouette.iter().map(|s| if *s { 255u8 } else { 0 }));
    out
}

/// Quantized 16-bit depth image and its sidecar.
pub fn encode_depth(buffers: &RenderBuffers) -> (Vec<u8>, DepthSidecar) {
    let fg = buffers.depth.iter().copied().filter(|d| d.is_finite());
    let (min, max) = fg.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let range = max - min;
    let mut out = pgm_header(buffers.width, buffers.height, 65535);
    for d in &buffers.depth {
        let q: u16 = if !d.is_finite() {
            0
        } else if range > 0.0 {
            1 + ((d - min) / range * DEPTH_LEVELS).round() as u16
        } else {
            1
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    let sidecar = DepthSidecar {
        width: buffers.width,
        height: buffers.height,
        min,
        max,
    };
    (out, sidecar)
}

/// Depth values from a PGM; `f64::INFINITY` marks background.
pub fn decode_depth(pgm: &Pgm, sidecar: Option<&DepthSidecar>) -> Result<Vec<f64>> {
    if let Some(s) = sidecar {
        if (s.width, s.height) != (pgm.width, pgm.height) {
            return Err(Error::Format(format!(
                "depth sidecar is {}x{} but the image is {}x{}",
                s.width, s.height, pgm.width, pgm.height
            )));
        }
    }
    Ok(pgm
        .samples
        .iter()
        .map(|&q| match (q, sidecar) {
            (0, _) => f64::INFINITY,
            (q, Some(s)) => s.min + (q - 1) as f64 / DEPTH_LEVELS * (s.max - s.min),
            (q, None) => q as f64,
        })
        .collect())
}

/// Normal map as PNG bytes.
pub fn normal_png(buffers: &RenderBuffers) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut rgb = Vec::with_capacity(buffers.len() * 3);
    for (n, s) in buffers.normal.iter().zip(&buffers.silhouette) {
        for c in n.iter() {
            let v = if *s { ((c + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 };
            rgb.push(v);
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        &rgb,
        buffers.width as u32,
        buffers.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PGM header is truncated".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    Ok((tokens, pos))
}

/// Parses `P5` (binary) or `P2` (ASCII) PGM.
pub fn read_pgm(bytes: &[u8]) -> Result<Pgm> {
    let (tok, mut pos) = header_tokens(bytes, 4)?;
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad PGM header value {s:?}"))) };
    let (width, height, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
    let samples: Vec<u16> = match tok[0].as_str() {
        "P5" => {
            pos += 1;
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            let body = bytes
                .get(pos..pos + need)
                .ok_or_else(|| Error::Format(format!("PGM body is truncated: expected {need} bytes")))?;
            if wide {
                body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
            } else {
                body.iter().map(|b| *b as u16).collect()
            }
        }
        "P2" => {
            let (vals, _) = header_tokens(&bytes[pos..], n)?;
            vals.iter()
                .map(|v| v.parse::<u16>().map_err(|_| Error::Format(format!("bad PGM sample {v:?}"))))
                .collect::<Result<_>>()?
        }
        magic => return Err(Error::Format(format!("unsupported image magic {magic:?}"))),
    };
    if let Some(v) = samples.iter().find(|v| **v as usize > maxval) {
        return Err(Error::Format(format!("PGM sample {v} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads a depth PGM together with its sidecar when one exists.
pub fn load_depth_map(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let pgm = read_pgm(&read_bytes(path)?)?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let bytes = read_bytes(&side)?;
        Some(serde_json::from_slice::<DepthSidecar>(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", side.display()),
        })?)
    } else {
        None
    };
    let depth = decode_depth(&pgm, sidecar.as_ref())?;
    Ok((pgm.width, pgm.height, depth))
}

pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let pgm = read_pgm(&read_bytes(path)?)?;
    Ok((pgm.width, pgm.height, pgm.samples.iter().map(|v| *v > 0).collect()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BufferPaths {
    pub silhouette: PathBuf,
    pub depth: PathBuf,
    pub depth_sidecar: PathBuf,
    pub normal: PathBuf,
}

/// Writes `<prefix>_silhouette.pgm`, `<prefix>_depth.pgm` (+ `.json`) and `<prefix>_normal.png`.
pub fn write_buffers(buffers: &RenderBuffers, prefix: &Path) -> Result<BufferPaths> {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let paths = BufferPaths {
        silhouette: with("_silhouette.pgm"),
        depth: with("_depth.pgm"),
        depth_sidecar: with("_depth.json"),
        normal: with("_normal.png"),
    };
    let (depth, sidecar) = encode_depth(buffers);
    let mut side = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    side.push(b'\n');
    write_atomic(&paths.silhouette, &silhouette_pgm(buffers))?;
    write_atomic(&paths.depth, &depth)?;
    write_atomic(&paths.depth_sidecar, &side)?;
    write_atomic(&paths.normal, &normal_png(buffers)?)?;
    Ok(paths)
}
