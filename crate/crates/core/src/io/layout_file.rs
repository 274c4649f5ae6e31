//! Layout JSON:
//!
//! ```json
//! { "canvas": [512, 512], "prompt": "...", "entries": [{ "bbox": [x1, y1, x2, y2], "label": "..." }] }
//! ```
//!
//! `canvas` defaults to 512x512 and `prompt` to the empty string. Unknown keys
//! are ignored, so scene files load as layouts too.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_bytes;
use crate::error::{Error, Result};
use crate::scene::{BBox2D, Canvas, LayoutEntry, LayoutSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Every row must be `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2` inside the canvas.
    #[default]
    Strict,
    /// Rows that fail the strict check are reinterpreted.
    Lenient,
}

impl std::str::FromStr for LoadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(LoadMode::Strict),
            "lenient" => Ok(LoadMode::Lenient),
            other => Err(Error::InvalidInput(format!("unknown load mode {other:?}"))),
        }
    }
}

/// How a raw row was read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowInterpretation {
    /// `[x1, y1, x2, y2]` as written.
    Corners,
    /// `[x, y, w, h]`.
    Xywh,
    /// Corners given in the wrong order, swapped per axis. Used only when the
    /// `[x, y, w, h]` reading is itself invalid (for example `h = 0`).
    SortedCorners,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedLayout {
    pub spec: LayoutSpec,
    pub interpretations: Vec<RowInterpretation>,
}

#[derive(Deserialize)]
struct RawLayout {
    #[serde(default)]
    canvas: Canvas,
    #[serde(default)]
    prompt: String,
    entries: Vec<RawEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    bbox: [f64; 4],
    label: String,
}

/// Reads one raw row under `mode`.
pub fn interpret_row(
    raw: [f64; 4],
    canvas: Canvas,
    mode: LoadMode,
) -> std::result::Result<(BBox2D, RowInterpretation), String> {
    let corners = BBox2D::from(raw);
    let strict = corners.validate(canvas);
    if strict.is_ok() || mode == LoadMode::Strict {
        return strict.map(|()| (corners, RowInterpretation::Corners));
    }
    let [a, b, c, d] = raw;
    let xywh = BBox2D::new(a, b, a + c, b + d);
    if xywh.validate(canvas).is_ok() {
        return Ok((xywh, RowInterpretation::Xywh));
    }
    let sorted = BBox2D::new(a.min(c), b.min(d), a.max(c), b.max(d));
    sorted
        .validate(canvas)
        .map(|()| (sorted, RowInterpretation::SortedCorners))
        .map_err(|e| format!("no reading of the row is valid: {e}"))
}

/// Parses layout JSON text.
pub fn parse_layout_spec(text: &str, mode: LoadMode) -> Result<LoadedLayout> {
    let raw: RawLayout = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    build_layout(
        raw.canvas,
        raw.prompt,
        raw.entries.into_iter().map(|e| (e.bbox, e.label)),
        mode,
    )
}

pub(super) fn build_layout(
    canvas: Canvas,
    prompt: String,
    rows: impl Iterator<Item = ([f64; 4], String)>,
    mode: LoadMode,
) -> Result<LoadedLayout> {
    let mut entries = Vec::new();
    let mut interpretations = Vec::new();
    for (i, (raw, label)) in rows.enumerate() {
        let (bbox, how) =
            interpret_row(raw, canvas, mode).map_err(|message| Error::Validation { entry: i, message })?;
        entries.push(LayoutEntry { bbox, label });
        interpretations.push(how);
    }
    Ok(LoadedLayout {
        spec: LayoutSpec::new(canvas, entries, prompt)?,
        interpretations,
    })
}

pub fn load_layout_spec_detailed(path: &Path, mode: LoadMode) -> Result<LoadedLayout> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_layout_spec(text, mode)
}

pub fn load_layout_spec(path: &Path, mode: LoadMode) -> Result<LayoutSpec> {
    Ok(load_layout_spec_detailed(path, mode)?.spec)
}
