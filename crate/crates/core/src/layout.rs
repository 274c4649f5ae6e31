//! Lifting a 2D layout to initial 3D transforms.
//!
//! Scale comes from the ratio of the layout box width to the width the object
//! occupies in its recentred instance image, in-plane translation from the box
//! center, depth from the masked mean of a relative depth map, and rotation
//! from a feature-similarity search over a grid of camera poses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{cosine_similarity, FeatureExtractor, FeatureVec};
use crate::raster::{
    default_object_radius, render, CameraModel, DEFAULT_FOV_DEG, POSE_SEARCH_RESOLUTION,
};
use crate::scene::{BBox2D, Canvas, GaussianCloud, InstanceTransform, LayoutSpec, Pose, Vec3};

/// Fraction of the instance canvas the recentred object occupies.
pub const POSTPROCESS_FILL: f64 = 0.9;

/// Object width in a recentred instance image of side `canvas_side` (460 for 512).
pub fn default_postprocessed_width(canvas_side: u32) -> f64 {
    (POSTPROCESS_FILL * canvas_side as f64).floor()
}

/// `width(orig_box) / postprocessed_width`.
pub fn init_scale(orig_box: &BBox2D, postprocessed_width: f64) -> Result<f64> {
    let w = orig_box.width();
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidInput(format!("box width {w} must be positive")));
    }
    if !(postprocessed_width > 0.0 && postprocessed_width.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "postprocessed width {postprocessed_width} must be positive"
        )));
    }
    Ok(w / postprocessed_width)
}

/// Box center mapped to scene coordinates in `[-1, 1]`, with `y` pointing up.
pub fn init_translation_xy(bbox: &BBox2D, canvas: Canvas) -> Result<(f64, f64)> {
    if !bbox.within(canvas) {
        return Err(Error::InvalidInput(format!(
            "box [{}, {}, {}, {}] lies outside the {}x{} canvas",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2, canvas.width, canvas.height
        )));
    }
    let (cx, cy) = bbox.center();
    let x = 2.0 * cx / canvas.width as f64 - 1.0;
    let y = 1.0 - 2.0 * cy / canvas.height as f64;
    Ok((x, y))
}

/// Relative depth map and per-instance foreground masks on the layout canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthInput {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
}

impl DepthInput {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, masks: Vec<Vec<bool>>) -> Result<Self> {
        let n = width * height;
        if depth.len() != n {
            return Err(Error::InvalidInput(format!(
                "depth map has {} values for {}x{}",
                depth.len(),
                width,
                height
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != n {
                return Err(Error::InvalidInput(format!("mask {i} has {} pixels, expected {n}", m.len())));
            }
            if m.iter().zip(&depth).any(|(on, d)| *on && !(d.is_finite() && *d >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "depth under mask {i} must be finite and nonnegative"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            depth,
            masks,
        })
    }

    /// Checks that every mask lies inside its layout box (pixel centers).
    pub fn check_within_boxes(&self, boxes: &[BBox2D]) -> Result<()> {
        for (i, (m, b)) in self.masks.iter().zip(boxes).enumerate() {
            for y in 0..self.height {
                for x in 0..self.width {
                    if m[y * self.width + x] {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
                            return Err(Error::Validation {
                                entry: i,
                                message: format!("mask pixel ({x}, {y}) lies outside the box"),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean raw depth under mask `i`.
    pub fn masked_mean(&self, i: usize) -> Result<f64> {
        let mask = self
            .masks
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("no mask for instance {i}")))?;
        let (sum, count) = mask
            .iter()
            .zip(&self.depth)
            .filter(|(m, _)| **m)
            .fold((0.0, 0usize), |(s, c), (_, d)| (s + d, c + 1));
        if count == 0 {
            return Err(Error::EmptyMask(i));
        }
        Ok(sum / count as f64)
    }
}

/// Depth of every instance: masked means remapped affinely onto `[-1, 1]`, nearer
/// (smaller raw depth) mapping to larger `z`. Equal means map to 0.
pub fn init_depths(input: &DepthInput) -> Result<Vec<f64>> {
    let means = (0..input.masks.len())
        .map(|i| input.masked_mean(i))
        .collect::<Result<Vec<_>>>()?;
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(means
        .iter()
        .map(|m| if span > 0.0 { 1.0 - 2.0 * (m - lo) / span } else { 0.0 })
        .collect())
}

pub fn init_depth_z(input: &DepthInput, instance: usize) -> Result<f64> {
    if instance >= input.masks.len() {
        return Err(Error::InvalidInput(format!("no mask for instance {instance}")));
    }
    Ok(init_depths(input)?[instance])
}

/// Camera poses sampled on a regular azimuth/elevation lattice.
///
/// Poses are ordered elevation-major with the elevation closest to zero first
/// (ties toward negative), azimuth ascending from 0, so index 0 is the front view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub step: f64,
    pub elevation: [f64; 2],
    pub poses: Vec<Pose>,
}

pub fn build_pose_grid(step: f64, elevation: [f64; 2]) -> Result<PoseGrid> {
    build_pose_grid_with_radius(step, elevation, default_object_radius(DEFAULT_FOV_DEG))
}

pub fn build_pose_grid_with_radius(step: f64, elevation: [f64; 2], radius: f64) -> Result<PoseGrid> {
    if !(step > 0.0 && step <= 90.0) {
        return Err(Error::InvalidStep(step));
    }
    let per_turn = (360.0 / step).round();
    if (per_turn * step - 360.0).abs() > 1e-9 {
        return Err(Error::InvalidStep(step));
    }
    let [lo, hi] = elevation;
    if !((-90.0..=0.0).contains(&lo) && (0.0..=90.0).contains(&hi)) {
        return Err(Error::InvalidInput(format!(
            "elevation range [{lo}, {hi}] must lie in [-90, 90] and contain 0"
        )));
    }
    let below = (-lo / step + 1e-9).floor() as i64;
    let above = (hi / step + 1e-9).floor() as i64;
    let mut levels: Vec<i64> = (-below..=above).collect();
    levels.sort_by_key(|k| (k.abs(), *k));
    let mut poses = Vec::with_capacity(levels.len() * per_turn as usize);
    for k in levels {
        for a in 0..per_turn as i64 {
            poses.push(Pose::new(k as f64 * step, a as f64 * step, radius)?);
        }
    }
    Ok(PoseGrid {
        step,
        elevation,
        poses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationEstimate {
    pub pose: Pose,
    pub index: usize,
    pub similarity: f64,
    /// Cosine similarity at every grid pose, in grid order.
    pub similarities: Vec<f64>,
}

impl RotationEstimate {
    /// Initial object rotation: the inverse of the chosen camera rotation.
    pub fn rotation(&self) -> nalgebra::UnitQuaternion<f64> {
        self.pose.object_rotation()
    }
}

/// Renders `cloud` at every grid pose and picks the pose whose feature has the
/// highest cosine similarity with `reference`; ties keep the lowest index.
pub fn estimate_rotation(
    cloud: &GaussianCloud,
    reference: &FeatureVec,
    grid: &PoseGrid,
    extractor: &dyn FeatureExtractor,
    resolution: usize,
) -> Result<RotationEstimate> {
    if grid.poses.is_empty() {
        return Err(Error::InvalidInput("pose grid is empty".into()));
    }
    let similarities = grid
        .poses
        .par_iter()
        .map(|pose| {
            let cam = CameraModel::new(*pose, DEFAULT_FOV_DEG, resolution, resolution)?;
            let feature = render(cloud, &cam)
                .and_then(|b| extractor.extract(&b))
                .map_err(|e| Error::Extractor {
                    pose: *pose,
                    source: Box::new(e),
                })?;
            cosine_similarity(reference, &feature)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (j, s) in similarities.iter().enumerate() {
        if *s > similarities[best] {
            best = j;
        }
    }
    Ok(RotationEstimate {
        pose: grid.poses[best],
        index: best,
        similarity: similarities[best],
        similarities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Object width in the recentred instance image; `None` uses 90% of the canvas width.
    pub postprocessed_width: Option<f64>,
    pub grid_step: f64,
    pub elevation_range: [f64; 2],
    pub resolution: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            postprocessed_width: None,
            grid_step: 10.0,
            elevation_range: [-30.0, 60.0],
            resolution: POSE_SEARCH_RESOLUTION,
        }
    }
}

/// Result of lifting one layout entry.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceInit {
    pub transform: InstanceTransform,
    pub rotation: Option<RotationEstimate>,
}

/// Lifts every layout entry. `clouds` are canonical (unit-extent) instances in
/// entry order; `references` optionally carry each instance's reference
/// feature. Without depth input all instances sit at `z = 0`; without a
/// reference feature the rotation stays at identity.
pub fn initialize_layout(
    layout: &LayoutSpec,
    clouds: &[GaussianCloud],
    depth: Option<&DepthInput>,
    references: &[Option<FeatureVec>],
    extractor: &dyn FeatureExtractor,
    cfg: &InitConfig,
) -> Result<Vec<InstanceInit>> {
    let n = layout.entries.len();
    if clouds.len() != n || references.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} entries but {} clouds and {} references",
            n,
            clouds.len(),
            references.len()
        )));
    }
    let width = cfg
        .postprocessed_width
        .unwrap_or_else(|| default_postprocessed_width(layout.canvas.width));
    let depths = match depth {
        Some(d) => {
            if d.masks.len() != n {
                return Err(Error::InvalidInput(format!("{} masks for {} entries", d.masks.len(), n)));
            }
            d.check_within_boxes(&layout.entries.iter().map(|e| e.bbox).collect::<Vec<_>>())?;
            init_depths(d)?
        }
        None => vec![0.0; n],
    };
    let grid = build_pose_grid(cfg.grid_step, cfg.elevation_range)?;
    layout
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let scale = init_scale(&entry.bbox, width)?;
            let (x, y) = init_translation_xy(&entry.bbox, layout.canvas)?;
            let rotation = match &references[i] {
                Some(f) => Some(estimate_rotation(&clouds[i], f, &grid, extractor, cfg.resolution)?),
                None => None,
            };
            let q = rotation
                .as_ref()
                .map_or_else(nalgebra::UnitQuaternion::identity, |r| r.rotation());
            Ok(InstanceInit {
                transform: InstanceTransform::new(scale, q, Vec3::new(x, y, depths[i]))?,
                rotation,
            })
        })
        .collect()
}
