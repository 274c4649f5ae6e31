//! Scene data: per-instance point clouds, similarity transforms, camera poses,
//! 2D layouts, and the composed scene.
//!
//! Transforms apply scale first, then rotation, then translation:
//! `p' = s * R(q) * p + t`. The world frame is right-handed with `+y` up; the
//! reference (front) camera sits on the `+z` axis looking toward the origin.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Radius assigned to points when a source carries no per-point radius.
pub const DEFAULT_RADIUS: f64 = 0.01;
pub const DEFAULT_OPACITY: f64 = 1.0;
pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// A set of isotropic splats: positions with per-point radius, opacity and color.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    points: Vec<Vec3>,
    radii: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new(
        points: Vec<Vec3>,
        radii: Vec<f64>,
        opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let n = points.len();
        if radii.len() != n || opacities.len() != n || colors.len() != n {
            return Err(Error::InvalidInput(format!(
                "attribute lengths differ: {} points, {} radii, {} opacities, {} colors",
                n,
                radii.len(),
                opacities.len(),
                colors.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        if let Some(i) = radii.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidInput(format!("radius of point {i} is not positive")));
        }
        if let Some(i) = opacities.iter().position(|o| !(0.0..=1.0).contains(o)) {
            return Err(Error::InvalidInput(format!("opacity of point {i} outside [0, 1]")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| !c.iter().all(|v| (0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidInput(format!("color of point {i} outside [0, 1]")));
        }
        Ok(Self {
            points,
            radii,
            opacities,
            colors,
        })
    }

    /// Cloud with a uniform radius and default opacity and color.
    pub fn from_points(points: Vec<Vec3>, radius: f64) -> Result<Self> {
        let n = points.len();
        Self::new(
            points,
            vec![radius; n],
            vec![DEFAULT_OPACITY; n],
            vec![DEFAULT_COLOR; n],
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn opacities(&self) -> &[f64] {
        &self.opacities
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    /// Largest distance of any point from the coordinate mean.
    pub fn extent(&self) -> f64 {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| (p - c).norm())
            .fold(0.0, f64::max)
    }

    /// Appends `other` after the points of `self`.
    pub fn extend(&mut self, other: &GaussianCloud) {
        self.points.extend_from_slice(&other.points);
        self.radii.extend_from_slice(&other.radii);
        self.opacities.extend_from_slice(&other.opacities);
        self.colors.extend_from_slice(&other.colors);
    }

    /// Keeps only the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.radii[i]).collect(),
            indices.iter().map(|&i| self.opacities[i]).collect(),
            indices.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

pub(crate) fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Similarity transform of one instance.
///
/// Serialized as `{"scale": s, "rotation": [w, x, y, z], "translation": [x, y, z]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct InstanceTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for InstanceTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl InstanceTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vec3) -> Result<Self> {
        let xf = Self {
            scale,
            rotation,
            translation,
        };
        xf.validate()?;
        Ok(xf)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        let q = self.rotation.quaternion();
        if !q.coords.iter().all(|c| c.is_finite()) || (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("rotation is not a unit quaternion".into()));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation_matrix() * p) + self.translation
    }

    /// The transform equivalent to applying `inner` first and then `self`.
    pub fn compose(&self, inner: &InstanceTransform) -> InstanceTransform {
        InstanceTransform {
            scale: self.scale * inner.scale,
            rotation: self.rotation * inner.rotation,
            translation: self.scale * (self.rotation * inner.translation) + self.translation,
        }
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct TransformRecord {
    scale: f64,
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl From<InstanceTransform> for TransformRecord {
    fn from(xf: InstanceTransform) -> Self {
        Self {
            scale: xf.scale,
            rotation: xf.quaternion_wxyz(),
            translation: xf.translation.into(),
        }
    }
}

impl TryFrom<TransformRecord> for InstanceTransform {
    type Error = Error;

    fn try_from(r: TransformRecord) -> Result<Self> {
        let [w, x, y, z] = r.rotation;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() - 1.0).is_finite() || (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "rotation [{w}, {x}, {y}, {z}] is not a unit quaternion"
            )));
        }
        // stored values are kept bit-exact when already normalized to 1e-9
        let rotation = if (q.norm() - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        InstanceTransform::new(r.scale, rotation, Vec3::from(r.translation))
    }
}

/// Gradient of a scalar loss with respect to one [`InstanceTransform`].
///
/// `rotation` is taken in the world-frame tangent space: the transform is
/// perturbed as `R <- exp(w) * R`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformGrad {
    pub scale: f64,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl TransformGrad {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn rotation_vec(&self) -> Vec3 {
        Vec3::from(self.rotation)
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
            && self.rotation.iter().all(|v| *v == 0.0)
            && self.translation.iter().all(|v| *v == 0.0)
    }

    pub fn add_assign(&mut self, other: &TransformGrad) {
        self.scale += other.scale;
        for k in 0..3 {
            self.rotation[k] += other.rotation[k];
            self.translation[k] += other.translation[k];
        }
    }

    pub fn scaled(&self, factor: f64) -> TransformGrad {
        TransformGrad {
            scale: self.scale * factor,
            rotation: self.rotation.map(|v| v * factor),
            translation: self.translation.map(|v| v * factor),
        }
    }
}

/// Applies `xf` to every point; radii scale with `xf.scale`.
pub fn apply_transform(cloud: &GaussianCloud, xf: &InstanceTransform) -> Result<GaussianCloud> {
    let m = xf.rotation_matrix();
    let points: Vec<Vec3> = cloud
        .points
        .iter()
        .map(|p| xf.scale * (m * p) + xf.translation)
        .collect();
    let radii: Vec<f64> = cloud.radii.iter().map(|r| r * xf.scale).collect();
    if points.iter().any(|p| !p.iter().all(|c| c.is_finite()))
        || radii.iter().any(|r| !r.is_finite() || *r <= 0.0)
    {
        return Err(Error::NumericOverflow("transformed cloud is not finite".into()));
    }
    Ok(GaussianCloud {
        points,
        radii,
        opacities: cloud.opacities.clone(),
        colors: cloud.colors.clone(),
    })
}

/// Centers a cloud at the origin and rescales it to unit extent.
///
/// Returns the removed center and the original extent; applying the transform
/// with scale `extent` and translation `center` restores the input.
pub fn normalize_cloud(cloud: &GaussianCloud) -> Result<(GaussianCloud, Vec3, f64)> {
    let center = cloud.centroid();
    let extent = cloud.extent();
    if !(extent > 0.0) {
        return Err(Error::ZeroExtent);
    }
    let points = cloud.points.iter().map(|p| (p - center) / extent).collect();
    let radii = cloud.radii.iter().map(|r| r / extent).collect();
    let out = GaussianCloud {
        points,
        radii,
        opacities: cloud.opacities.clone(),
        colors: cloud.colors.clone(),
    };
    Ok((out, center, extent))
}

/// Camera placement on a sphere around the origin, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
}

impl Pose {
    pub fn new(elevation: f64, azimuth: f64, radius: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(Error::InvalidInput(format!(
                "elevation {elevation} outside [-90, 90]"
            )));
        }
        if !azimuth.is_finite() {
            return Err(Error::InvalidInput("azimuth is not finite".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidInput(format!("camera radius {radius} must be positive")));
        }
        Ok(Self {
            elevation,
            azimuth: azimuth.rem_euclid(360.0),
            radius,
        })
    }

    /// Rotation taking camera-frame vectors to world-frame vectors.
    ///
    /// Azimuth turns about `+y`, elevation lifts the camera toward `+y`.
    pub fn camera_rotation(&self) -> UnitQuaternion<f64> {
        let yaw = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), self.azimuth.to_radians());
        let pitch = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), -self.elevation.to_radians());
        yaw * pitch
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        self.camera_rotation() * Vec3::new(0.0, 0.0, self.radius)
    }

    /// Object rotation that makes the reference (front) camera see what this
    /// pose sees of the unrotated object.
    pub fn object_rotation(&self) -> UnitQuaternion<f64> {
        self.camera_rotation().inverse()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(elev {}, azim {}, r {})",
            self.elevation, self.azimuth, self.radius
        )
    }
}

/// Axis-aligned pixel box `[x1, y1, x2, y2]`, image origin at the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox2D {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox2D> for [f64; 4] {
    fn from(b: BBox2D) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within(&self, canvas: Canvas) -> bool {
        let (w, h) = (canvas.width as f64, canvas.height as f64);
        [self.x1, self.x2].iter().all(|x| (0.0..=w).contains(x))
            && [self.y1, self.y2].iter().all(|y| (0.0..=h).contains(y))
    }

    /// Checks ordering and canvas bounds.
    pub fn validate(&self, canvas: Canvas) -> std::result::Result<(), String> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if !self.is_ordered() {
            return Err(format!(
                "box [{}, {}, {}, {}] violates x1 < x2 and y1 < y2",
                self.x1, self.y1, self.x2, self.y2
            ));
        }
        if !self.within(canvas) {
            return Err(format!(
                "box [{}, {}, {}, {}] exceeds the {}x{} canvas",
                self.x1, self.y1, self.x2, self.y2, canvas.width, canvas.height
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
        }
    }
}

impl From<[u32; 2]> for Canvas {
    fn from(v: [u32; 2]) -> Self {
        Self {
            width: v[0],
            height: v[1],
        }
    }
}

impl From<Canvas> for [u32; 2] {
    fn from(c: Canvas) -> Self {
        [c.width, c.height]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub bbox: BBox2D,
    pub label: String,
}

/// Labeled boxes on a canvas plus the global prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSpec {
    pub canvas: Canvas,
    pub entries: Vec<LayoutEntry>,
    pub prompt: String,
}

impl LayoutSpec {
    pub fn new(canvas: Canvas, entries: Vec<LayoutEntry>, prompt: impl Into<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation {
                entry: 0,
                message: "layout has no entries".into(),
            });
        }
        for (i, e) in entries.iter().enumerate() {
            e.bbox
                .validate(canvas)
                .map_err(|message| Error::Validation { entry: i, message })?;
        }
        Ok(Self {
            canvas,
            entries,
            prompt: prompt.into(),
        })
    }
}

/// One placed object: its canonical cloud and the transform into the world.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub label: String,
    pub cloud: GaussianCloud,
    pub transform: InstanceTransform,
}

impl Instance {
    pub fn new(id: impl Into<String>, label: impl Into<String>, cloud: GaussianCloud) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            cloud,
            transform: InstanceTransform::identity(),
        }
    }

    pub fn with_transform(mut self, transform: InstanceTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn world_cloud(&self) -> Result<GaussianCloud> {
        apply_transform(&self.cloud, &self.transform)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    instances: Vec<Instance>,
}

impl Scene {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidInput("scene has no instances".into()));
        }
        let mut seen = HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate instance id {:?}", inst.id)));
            }
            inst.transform.validate()?;
        }
        Ok(Self { instances })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn transforms(&self) -> Vec<InstanceTransform> {
        self.instances.iter().map(|i| i.transform).collect()
    }

    /// Replaces every transform; the count must match.
    pub fn set_transforms(&mut self, transforms: &[InstanceTransform]) -> Result<()> {
        if transforms.len() != self.instances.len() {
            return Err(Error::InvalidInput(format!(
                "{} transforms for {} instances",
                transforms.len(),
                self.instances.len()
            )));
        }
        for xf in transforms {
            xf.validate()?;
        }
        for (inst, xf) in self.instances.iter_mut().zip(transforms) {
            inst.transform = *xf;
        }
        Ok(())
    }

    pub fn with_transforms(&self, transforms: &[InstanceTransform]) -> Result<Self> {
        let mut out = self.clone();
        out.set_transforms(transforms)?;
        Ok(out)
    }
}

/// World-space union of every instance, in instance order.
pub fn compose_scene(scene: &Scene) -> Result<GaussianCloud> {
    let mut iter = scene.instances.iter();
    let first = iter.next().ok_or(Error::EmptyCloud)?;
    let mut out = first.world_cloud()?;
    for inst in iter {
        out.extend(&inst.world_cloud()?);
    }
    Ok(out)
}
