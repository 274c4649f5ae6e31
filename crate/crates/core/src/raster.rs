//! Hard-edged point-splat rasterizer producing silhouette, depth and normal
//! buffers.
//!
//! Every point with opacity at least [`OPACITY_THRESHOLD`] projects to a disc of
//! its screen-space radius. A pixel is covered when its center lies inside the
//! disc, and the pixel holding the projected center is always covered. The
//! nearest point wins each pixel; ties keep the lower point index, so output is
//! bit-deterministic.
//!
//! Depth is the camera-space distance along the viewing axis. Normals are in the
//! camera frame (`+z` points back toward the camera).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GaussianCloud, Pose, Vec3};

pub const OPACITY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FOV_DEG: f64 = 45.0;
/// Resolution used when rendering candidate poses for rotation search.
pub const POSE_SEARCH_RESOLUTION: usize = 128;
/// Resolution used when rendering for loss evaluation.
pub const LOSS_RESOLUTION: usize = 256;
/// Fraction of the image a unit-extent object spans at the default radius.
pub const OBJECT_FILL: f64 = 0.8;

const NEAR: f64 = 1e-6;

/// Camera distance at which a unit-extent object fills [`OBJECT_FILL`] of the frame.
pub fn default_object_radius(fov_deg: f64) -> f64 {
    1.0 / (OBJECT_FILL * (fov_deg.to_radians() / 2.0).tan())
}

/// Camera distance at which the `z = 0` plane spans exactly `[-1, 1]` in the frame.
pub fn scene_camera_radius(fov_deg: f64) -> f64 {
    1.0 / (fov_deg.to_radians() / 2.0).tan()
}

/// Pinhole camera looking at the origin from `pose`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub pose: Pose,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(pose: Pose, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            pose,
            fov_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Object-centric camera: default field of view, radius framing a unit-extent object.
    pub fn for_object(elevation: f64, azimuth: f64, resolution: usize) -> Result<Self> {
        let pose = Pose::new(elevation, azimuth, default_object_radius(DEFAULT_FOV_DEG))?;
        Self::new(pose, DEFAULT_FOV_DEG, resolution, resolution)
    }

    /// Front view of a composed scene whose `z = 0` plane maps onto the canvas.
    pub fn reference_view(resolution: usize) -> Result<Self> {
        let pose = Pose::new(0.0, 0.0, scene_camera_radius(DEFAULT_FOV_DEG))?;
        Self::new(pose, DEFAULT_FOV_DEG, resolution, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidInput(format!(
                "field of view {} outside (0, 180)",
                self.fov_deg
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidInput(format!(
                "image {}x{} smaller than 8x8",
                self.width, self.height
            )));
        }
        let p = &self.pose;
        if !(p.elevation.is_finite() && p.azimuth.is_finite() && p.radius.is_finite() && p.radius > 0.0) {
            return Err(Error::InvalidInput(format!("invalid camera pose {p}")));
        }
        Ok(())
    }

    /// Focal length in pixels; the field of view is measured vertically.
    pub fn focal_px(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }
}

/// Per-pixel silhouette, depth and normal, row-major with the origin at the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels of the camera that produced the buffers.
    pub focal_px: f64,
    pub silhouette: Vec<bool>,
    /// `f64::INFINITY` marks background.
    pub depth: Vec<f64>,
    /// Zero vector on background.
    pub normal: Vec<Vec3>,
}

impl RenderBuffers {
    pub fn empty(width: usize, height: usize, focal_px: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            focal_px,
            silhouette: vec![false; n],
            depth: vec![f64::INFINITY; n],
            normal: vec![Vec3::zeros(); n],
        }
    }

    /// Builds buffers from a depth map; pixels with finite depth are foreground.
    /// Normals are derived from the depth.
    pub fn from_depth(width: usize, height: usize, focal_px: f64, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth has {} values for a {}x{} image",
                depth.len(),
                width,
                height
            )));
        }
        if depth.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(Error::InvalidInput("depth must be nonnegative".into()));
        }
        let silhouette = depth.iter().map(|d| d.is_finite()).collect();
        let raw = Self {
            width,
            height,
            focal_px,
            silhouette,
            depth,
            normal: vec![Vec3::zeros(); width * height],
        };
        Ok(normals_from_depth(&raw))
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn foreground_count(&self) -> usize {
        self.silhouette.iter().filter(|s| **s).count()
    }

    /// Keeps only the pixels where `mask` is set; everything else becomes background.
    pub fn masked(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} pixels, buffers have {}",
                mask.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                out.silhouette[i] = false;
                out.depth[i] = f64::INFINITY;
                out.normal[i] = Vec3::zeros();
            }
        }
        Ok(out)
    }

    /// Multiplies every foreground depth by `factor`.
    pub fn scale_depth(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (d, s) in out.depth.iter_mut().zip(&self.silhouette) {
            if *s {
                *d *= factor;
            }
        }
        out
    }
}

/// Splats `cloud` into buffers as seen by `cam`, then derives normals from depth.
pub fn render(cloud: &GaussianCloud, cam: &CameraModel) -> Result<RenderBuffers> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let focal = cam.focal_px();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let world_to_cam = cam.pose.camera_rotation().inverse().to_rotation_matrix();
    let eye = cam.pose.position();

    let mut buf = RenderBuffers::empty(w, h, focal);
    let n = cloud.len();
    let (points, radii, opacities) = (cloud.points(), cloud.radii(), cloud.opacities());
    for i in 0..n {
        if opacities[i] < OPACITY_THRESHOLD {
            continue;
        }
        let pc = world_to_cam * (points[i] - eye);
        if !pc.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} projects to a non-finite position")));
        }
        let depth = -pc.z;
        if depth <= NEAR {
            continue;
        }
        let u = cx + focal * pc.x / depth;
        let v = cy - focal * pc.y / depth;
        let r = focal * radii[i] / depth;
        if !(u.is_finite() && v.is_finite() && r.is_finite()) {
            continue;
        }
        let x0 = (u - r - 0.5).floor().max(0.0);
        let x1 = (u + r - 0.5).ceil().min(w as f64 - 1.0);
        let y0 = (v - r - 0.5).floor().max(0.0);
        let y1 = (v + r - 0.5).ceil().min(h as f64 - 1.0);
        let (cu, cv) = (u.floor(), v.floor());
        let r2 = r * r;
        if x0 <= x1 && y0 <= y1 {
            for py in y0 as usize..=y1 as usize {
                let dy = py as f64 + 0.5 - v;
                for px in x0 as usize..=x1 as usize {
                    let dx = px as f64 + 0.5 - u;
                    let inside = dx * dx + dy * dy <= r2 || (px as f64 == cu && py as f64 == cv);
                    if !inside {
                        continue;
                    }
                    let k = py * w + px;
                    if depth < buf.depth[k] {
                        buf.depth[k] = depth;
                        buf.silhouette[k] = true;
                    }
                }
            }
        } else if cu >= 0.0 && cv >= 0.0 && cu < w as f64 && cv < h as f64 {
            // center pixel only; the disc itself misses every pixel center
            let k = cv as usize * w + cu as usize;
            if depth < buf.depth[k] {
                buf.depth[k] = depth;
                buf.silhouette[k] = true;
            }
        }
    }
    Ok(normals_from_depth(&buf))
}

/// Recomputes foreground normals from central differences of depth.
///
/// Each foreground pixel is back-projected to `depth * ((u - cx) / f, -(v - cy) / f, -1)`;
/// the normal is the cross product of the central differences of those points
/// along the image axes, oriented toward the camera. One-sided differences are
/// used next to background, and an axis without any foreground neighbour is
/// treated as having zero depth slope. A pixel with no foreground neighbour at
/// all receives the view direction `(0, 0, 1)`.
pub fn normals_from_depth(buffers: &RenderBuffers) -> RenderBuffers {
    let mut out = buffers.clone();
    let (w, h) = (buffers.width, buffers.height);
    let f = buffers.focal_px;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let point = |x: isize, y: isize| -> Option<Vec3> {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return None;
        }
        let k = y as usize * w + x as usize;
        if !buffers.silhouette[k] {
            return None;
        }
        let d = buffers.depth[k];
        let u = x as f64 + 0.5;
        let v = y as f64 + 0.5;
        Some(d * Vec3::new((u - cx) / f, -(v - cy) / f, -1.0))
    };
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if !buffers.silhouette[k] {
                out.normal[k] = Vec3::zeros();
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let here = point(xi, yi).expect("foreground pixel");
            let du = difference(point(xi - 1, yi), here, point(xi + 1, yi));
            let dv = difference(point(xi, yi - 1), here, point(xi, yi + 1));
            if du.is_none() && dv.is_none() {
                out.normal[k] = Vec3::new(0.0, 0.0, 1.0);
                continue;
            }
            let step = buffers.depth[k] / f;
            let du = du.unwrap_or(Vec3::new(step, 0.0, 0.0));
            let dv = dv.unwrap_or(Vec3::new(0.0, -step, 0.0));
            let n = du.cross(&dv);
            let len = n.norm();
            out.normal[k] = if len > 0.0 && len.is_finite() {
                if n.z < 0.0 {
                    -n / len
                } else {
                    n / len
                }
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            };
        }
    }
    out
}

fn difference(prev: Option<Vec3>, here: Vec3, next: Option<Vec3>) -> Option<Vec3> {
    match (prev, next) {
        (Some(a), Some(b)) => Some((b - a) / 2.0),
        (None, Some(b)) => Some(b - here),
        (Some(a), None) => Some(here - a),
        (None, None) => None,
    }
}
