//! Scene JSON: a layout whose entries also point at instance clouds.
//!
//! ```json
//! {
//!   "canvas": [512, 512],
//!   "prompt": "a teddy bear reading a book",
//!   "entries": [
//!     { "bbox": [88, 40, 168, 192], "label": "a teddy bear", "cloud": "bear.ply",
//!       "mask": "bear_mask.pgm", "reference": "bear_ref_depth.pgm",
//!       "transform": { "scale": 0.17, "rotation": [1, 0, 0, 0], "translation": [0, 0, 0] } }
//!   ],
//!   "depth_map": "depth.pgm",
//!   "reference": "scene_ref_depth.pgm",
//!   "config": { "load_mode": "strict", "init": { ... }, "optimize": { ... } }
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the scene file.
//! `reference` paths name either a feature JSON (`.json`) or a depth PGM whose
//! features are extracted on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::buffers::{load_depth_map, load_mask};
use super::layout_file::{build_layout, LoadMode, LoadedLayout};
use super::{load_ply, read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::guidance::{masked_reference_feature, union_mask, FeatureExtractor, FeatureVec};
use crate::layout::{DepthInput, InitConfig};
use crate::optimizer::LayoutOptConfig;
use crate::raster::{default_object_radius, scene_camera_radius, CameraModel, RenderBuffers, DEFAULT_FOV_DEG};
use crate::scene::{BBox2D, Canvas, GaussianCloud, Instance, InstanceTransform, Pose, Scene};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub load_mode: LoadMode,
    pub init: InitConfig,
    pub optimize: LayoutOptConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub bbox: [f64; 4],
    pub label: String,
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<InstanceTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default)]
    pub canvas: Canvas,
    #[serde(default)]
    pub prompt: String,
    pub entries: Vec<SceneEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub config: PipelineConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn not_found(path: PathBuf) -> Error {
    Error::File {
        path,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
    }
}

impl SceneFile {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut scene: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        scene.base_dir = base_dir.into();
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn referenced_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for e in &self.entries {
            out.push(&e.cloud);
            out.extend(e.mask.as_deref());
            out.extend(e.reference.as_deref());
        }
        out.extend(self.depth_map.as_deref());
        out.extend(self.reference.as_deref());
        out
    }

    /// Fails on the first referenced file that does not exist.
    pub fn check_references(&self) -> Result<()> {
        for p in self.referenced_paths() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(not_found(full));
            }
        }
        Ok(())
    }

    /// Layout boxes read under the configured load mode.
    pub fn layout(&self) -> Result<LoadedLayout> {
        build_layout(
            self.canvas,
            self.prompt.clone(),
            self.entries.iter().map(|e| (e.bbox, e.label.clone())),
            self.config.load_mode,
        )
    }

    pub fn load_clouds(&self) -> Result<Vec<GaussianCloud>> {
        self.entries.iter().map(|e| load_ply(&self.resolve(&e.cloud))).collect()
    }

    fn load_canvas_mask(&self, path: &Path) -> Result<Vec<bool>> {
        let (w, h, mask) = load_mask(&self.resolve(path))?;
        if (w as u32, h as u32) != (self.canvas.width, self.canvas.height) {
            return Err(Error::InvalidInput(format!(
                "mask {} is {w}x{h}, canvas is {}x{}",
                path.display(),
                self.canvas.width,
                self.canvas.height
            )));
        }
        Ok(mask)
    }

    /// Depth map plus per-entry masks. An entry without a mask uses the pixels
    /// of its box that carry depth.
    pub fn depth_input(&self, boxes: &[BBox2D]) -> Result<Option<DepthInput>> {
        let Some(path) = &self.depth_map else {
            return Ok(None);
        };
        let (w, h, depth) = load_depth_map(&self.resolve(path))?;
        if (w as u32, h as u32) != (self.canvas.width, self.canvas.height) {
            return Err(Error::InvalidInput(format!(
                "depth map is {w}x{h}, canvas is {}x{}",
                self.canvas.width, self.canvas.height
            )));
        }
        let masks = self
            .entries
            .iter()
            .zip(boxes)
            .map(|(e, b)| match &e.mask {
                Some(p) => self.load_canvas_mask(p),
                None => Ok(box_mask(b, w, h, &depth)),
            })
            .collect::<Result<Vec<_>>>()?;
        DepthInput::new(w, h, depth, masks).map(Some)
    }

    /// Per-entry reference features for rotation search.
    pub fn instance_references(&self, extractor: &dyn FeatureExtractor) -> Result<Vec<Option<FeatureVec>>> {
        self.entries
            .iter()
            .map(|e| {
                e.reference
                    .as_ref()
                    .map(|p| {
                        load_reference(&self.resolve(p), extractor, |w, h| {
                            let pose = Pose::new(0.0, 0.0, default_object_radius(DEFAULT_FOV_DEG))?;
                            Ok(CameraModel::new(pose, DEFAULT_FOV_DEG, w, h)?.focal_px())
                        }, None)
                    })
                    .transpose()
            })
            .collect()
    }

    /// Scene reference feature, masked by the union of entry masks when every
    /// entry has one.
    pub fn scene_reference(&self, extractor: &dyn FeatureExtractor) -> Result<Option<FeatureVec>> {
        let Some(path) = &self.reference else {
            return Ok(None);
        };
        let union = if !self.entries.is_empty() && self.entries.iter().all(|e| e.mask.is_some()) {
            let masks = self
                .entries
                .iter()
                .map(|e| load_mask(&self.resolve(e.mask.as_ref().unwrap())).map(|m| m.2))
                .collect::<Result<Vec<_>>>()?;
            Some(union_mask(&masks)?)
        } else {
            None
        };
        let focal = |w: usize, h: usize| -> Result<f64> {
            let pose = Pose::new(0.0, 0.0, scene_camera_radius(DEFAULT_FOV_DEG))?;
            Ok(CameraModel::new(pose, DEFAULT_FOV_DEG, w, h)?.focal_px())
        };
        load_reference(&self.resolve(path), extractor, focal, union.as_deref()).map(Some)
    }

    /// Instances with their stored transforms.
    pub fn build_scene(&self) -> Result<Scene> {
        let clouds = self.load_clouds()?;
        let instances = self
            .entries
            .iter()
            .zip(clouds)
            .enumerate()
            .map(|(i, (e, cloud))| {
                let t = e.transform.ok_or_else(|| Error::Validation {
                    entry: i,
                    message: "entry has no transform; run init first".into(),
                })?;
                Ok(Instance::new(i.to_string(), e.label.clone(), cloud).with_transform(t))
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(instances)
    }

    pub fn set_transforms(&mut self, transforms: &[InstanceTransform]) -> Result<()> {
        if transforms.len() != self.entries.len() {
            return Err(Error::InvalidInput(format!(
                "{} transforms for {} entries",
                transforms.len(),
                self.entries.len()
            )));
        }
        for (e, t) in self.entries.iter_mut().zip(transforms) {
            e.transform = Some(*t);
        }
        Ok(())
    }

    /// Rewrites relative paths so they stay valid from `dir`.
    pub fn rebase(&mut self, dir: &Path) -> Result<()> {
        let same = match (std::fs::canonicalize(&self.base_dir), std::fs::canonicalize(dir)) {
            (Ok(a), Ok(b)) => a == b,
            _ => self.base_dir == dir,
        };
        if same {
            return Ok(());
        }
        let base = std::path::absolute(&self.base_dir)?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for e in &mut self.entries {
            fix(&mut e.cloud);
            e.mask.iter_mut().for_each(fix);
            e.reference.iter_mut().for_each(fix);
        }
        self.depth_map.iter_mut().for_each(fix);
        self.reference.iter_mut().for_each(fix);
        self.base_dir = dir.to_path_buf();
        Ok(())
    }
}

fn box_mask(b: &BBox2D, w: usize, h: usize, depth: &[f64]) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            m[i] = px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2 && depth[i].is_finite();
        }
    }
    m
}

fn load_reference(
    path: &Path,
    extractor: &dyn FeatureExtractor,
    focal: impl Fn(usize, usize) -> Result<f64>,
    mask: Option<&[bool]>,
) -> Result<FeatureVec> {
    if path.extension().is_some_and(|e| e == "json") {
        let bytes = read_bytes(path)?;
        let f: FeatureVec = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        return FeatureVec::new(f.descriptor, f.values, f.blocks);
    }
    let (w, h, depth) = load_depth_map(path)?;
    let buffers = RenderBuffers::from_depth(w, h, focal(w, h)?, depth)?;
    match mask {
        Some(m) => masked_reference_feature(&buffers, m, extractor),
        None => extractor.extract(&buffers),
    }
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let scene = SceneFile::parse(text, base)?;
    scene.check_references()?;
    Ok(scene)
}

/// Writes the scene as pretty JSON, rebasing relative paths to the new location.
pub fn save_scene_file(scene: &SceneFile, path: &Path) -> Result<()> {
    let mut scene = scene.clone();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    scene.rebase(&dir)?;
    write_atomic(path, scene.to_json().as_bytes())
}
