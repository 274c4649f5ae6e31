//! Image-space losses and the guidance slot.
//!
//! Holds the feature extractor interface with its built-in silhouette/depth
//! descriptor, the feature-level reference loss, timestep schedules for
//! distillation guidance, total-variation and normal-smoothness regularizers,
//! and the [`GuidanceTerm`] trait that external score-distillation adapters
//! implement.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{CameraModel, RenderBuffers};
use crate::scene::{Scene, TransformGrad, Vec3};

/// Side length of the pooling grid used by the default descriptor.
pub const POOL_GRID: usize = 16;
pub const DEFAULT_DESCRIPTOR_ID: &str = "silhouette-depth-v1";
/// 16x16 silhouette + 16x16 depth + 5 moments.
pub const DEFAULT_DESCRIPTOR_LEN: usize = 2 * POOL_GRID * POOL_GRID + 5;

/// Fixed-length descriptor tagged with the extractor family that produced it.
///
/// `blocks` partitions `values` into consecutive sections; the reference loss
/// takes one Euclidean norm per section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec {
    pub descriptor: String,
    pub values: Vec<f64>,
    pub blocks: Vec<usize>,
}

impl FeatureVec {
    pub fn new(descriptor: impl Into<String>, values: Vec<f64>, blocks: Vec<usize>) -> Result<Self> {
        if blocks.iter().sum::<usize>() != values.len() {
            return Err(Error::InvalidInput(format!(
                "feature blocks sum to {} but the vector has {} values",
                blocks.iter().sum::<usize>(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature has non-finite values".into()));
        }
        Ok(Self {
            descriptor: descriptor.into(),
            values,
            blocks,
        })
    }

    /// A single-block feature.
    pub fn flat(descriptor: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(descriptor, values, vec![n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_compatible(&self, other: &FeatureVec) -> Result<()> {
        if self.descriptor != other.descriptor {
            return Err(Error::IncompatibleFeature(format!(
                "descriptor {:?} vs {:?}",
                self.descriptor, other.descriptor
            )));
        }
        if self.values.len() != other.values.len() || self.blocks != other.blocks {
            return Err(Error::IncompatibleFeature(format!(
                "length {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }
}

/// Maps rendered buffers to a descriptor. Implementations must be pure.
pub trait FeatureExtractor: Send + Sync {
    fn descriptor_id(&self) -> &str;
    fn extract(&self, buffers: &RenderBuffers) -> Result<FeatureVec>;
}

/// Built-in descriptor: pooled silhouette, pooled normalized depth and
/// second-order silhouette moments, L2-normalized as a whole.
#[derive(Clone, Copy, Debug, Default)]
pub struct SilhouetteDepthDescriptor;

impl FeatureExtractor for SilhouetteDepthDescriptor {
    fn descriptor_id(&self) -> &str {
        DEFAULT_DESCRIPTOR_ID
    }

    fn extract(&self, buffers: &RenderBuffers) -> Result<FeatureVec> {
        let (w, h) = (buffers.width, buffers.height);
        let fg = buffers.foreground_count();
        if fg == 0 {
            return Err(Error::EmptySilhouette);
        }
        let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for (d, s) in buffers.depth.iter().zip(&buffers.silhouette) {
            if *s {
                dmin = dmin.min(*d);
                dmax = dmax.max(*d);
            }
        }
        let range = dmax - dmin;
        let cells = POOL_GRID * POOL_GRID;
        let mut sil = vec![0.0; cells];
        let mut dep = vec![0.0; cells];
        let mut count = vec![0usize; cells];
        let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            let by = y * POOL_GRID / h;
            let ny = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            for x in 0..w {
                let bx = x * POOL_GRID / w;
                let cell = by * POOL_GRID + bx;
                count[cell] += 1;
                let k = y * w + x;
                if !buffers.silhouette[k] {
                    continue;
                }
                sil[cell] += 1.0;
                // nearer is brighter; invariant to positive rescaling of depth
                dep[cell] += if range > 0.0 {
                    1.0 - (buffers.depth[k] - dmin) / range
                } else {
                    1.0
                };
                let nx = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                mx += nx;
                my += ny;
                mxx += nx * nx;
                myy += ny * ny;
                mxy += nx * ny;
            }
        }
        let n = fg as f64;
        let (mx, my) = (mx / n, my / n);
        let moments = [
            mx,
            my,
            mxx / n - mx * mx,
            myy / n - my * my,
            mxy / n - mx * my,
        ];
        let mut values = Vec::with_capacity(DEFAULT_DESCRIPTOR_LEN);
        for (s, c) in sil.iter().zip(&count) {
            values.push(if *c > 0 { s / *c as f64 } else { 0.0 });
        }
        for (d, c) in dep.iter().zip(&count) {
            values.push(if *c > 0 { d / *c as f64 } else { 0.0 });
        }
        values.extend_from_slice(&moments);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        FeatureVec::new(DEFAULT_DESCRIPTOR_ID, values, vec![cells, cells, 5])
    }
}

pub fn cosine_similarity(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    a.check_compatible(b)?;
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// `lambda * sum over blocks of |f_ref - f_render|_2`.
pub fn reference_loss(f_ref: &FeatureVec, f_render: &FeatureVec, lambda: f64) -> Result<f64> {
    f_ref.check_compatible(f_render)?;
    let mut start = 0;
    let mut total = 0.0;
    for &len in &f_ref.blocks {
        let sq: f64 = f_ref.values[start..start + len]
            .iter()
            .zip(&f_render.values[start..start + len])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq.sqrt();
        start += len;
    }
    Ok(lambda * total)
}

/// Per-pixel logical-or of instance masks.
pub fn union_mask(masks: &[Vec<bool>]) -> Result<Vec<bool>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("no masks to combine".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.len() != out.len() {
            return Err(Error::InvalidInput("masks differ in size".into()));
        }
        for (o, v) in out.iter_mut().zip(m) {
            *o |= *v;
        }
    }
    Ok(out)
}

/// Feature of the reference buffers restricted to the union of instance masks.
pub fn masked_reference_feature(
    reference: &RenderBuffers,
    union: &[bool],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureVec> {
    if !union.iter().any(|m| *m) {
        return Err(Error::InvalidInput("union mask is empty".into()));
    }
    extractor.extract(&reference.masked(union)?)
}

/// Weighting applied to a sampled timestep by external guidance adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeighting {
    #[default]
    Constant,
}

impl TimestepWeighting {
    pub fn weight(&self, _t: f64) -> f64 {
        match self {
            TimestepWeighting::Constant => 1.0,
        }
    }
}

/// Iterations `[start, end)` draw timesteps uniformly from `[t_min, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    pub iters: [usize; 2],
    pub t: [f64; 2],
}

impl SchedulePhase {
    pub fn new(start: usize, end: usize, t_min: f64, t_max: f64) -> Self {
        Self {
            iters: [start, end],
            t: [t_min, t_max],
        }
    }

    pub fn contains(&self, iter: usize) -> bool {
        (self.iters[0]..self.iters[1]).contains(&iter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    pub phases: Vec<SchedulePhase>,
    #[serde(default)]
    pub weighting: TimestepWeighting,
}

/// Iteration at which the timestep range widens.
pub const TIMESTEP_SWITCH: usize = 800;

impl TimestepSchedule {
    pub fn new(phases: Vec<SchedulePhase>, weighting: TimestepWeighting) -> Result<Self> {
        let s = Self { phases, weighting };
        s.validate()?;
        Ok(s)
    }

    /// Narrow `[0.10, 0.50]` range until iteration 800, then `[0.02, 0.75]` until `total`.
    pub fn two_phase(total: usize) -> Self {
        Self {
            phases: vec![
                SchedulePhase::new(0, TIMESTEP_SWITCH, 0.10, 0.50),
                SchedulePhase::new(TIMESTEP_SWITCH, total, 0.02, 0.75),
            ],
            weighting: TimestepWeighting::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidInput("schedule has no phases".into()));
        }
        let mut expected_start = self.phases[0].iters[0];
        for (i, p) in self.phases.iter().enumerate() {
            if p.iters[0] != expected_start || p.iters[0] >= p.iters[1] {
                return Err(Error::InvalidInput(format!(
                    "phase {i} interval [{}, {}) is empty or not contiguous",
                    p.iters[0], p.iters[1]
                )));
            }
            if !(0.0 <= p.t[0] && p.t[0] < p.t[1] && p.t[1] <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "phase {i} timestep range [{}, {}] outside 0 <= t_min < t_max <= 1",
                    p.t[0], p.t[1]
                )));
            }
            expected_start = p.iters[1];
        }
        Ok(())
    }

    pub fn phase_at(&self, iter: usize) -> Result<&SchedulePhase> {
        self.phases
            .iter()
            .find(|p| p.contains(iter))
            .ok_or(Error::ScheduleExhausted(iter))
    }

    /// First iteration not covered by the schedule.
    pub fn end(&self) -> usize {
        self.phases.last().map_or(0, |p| p.iters[1])
    }
}

/// Uniform draw from the timestep range active at `iter`.
pub fn sample_timestep<R: Rng + ?Sized>(schedule: &TimestepSchedule, iter: usize, rng: &mut R) -> Result<f64> {
    let phase = schedule.phase_at(iter)?;
    let t = rng.gen_range(phase.t[0]..=phase.t[1]);
    assert!(
        (phase.t[0]..=phase.t[1]).contains(&t),
        "timestep {t} escaped [{}, {}]",
        phase.t[0],
        phase.t[1]
    );
    Ok(t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvKind {
    /// Squared differences.
    #[default]
    Squared,
    /// Absolute (Euclidean) differences.
    Absolute,
}

/// Per-pixel value usable by the total-variation loss.
pub trait FieldValue: Copy {
    fn squared_distance(&self, other: &Self) -> f64;
}

impl FieldValue for f64 {
    fn squared_distance(&self, other: &Self) -> f64 {
        (self - other) * (self - other)
    }
}

impl FieldValue for Vec3 {
    fn squared_distance(&self, other: &Self) -> f64 {
        (self - other).norm_squared()
    }
}

fn check_dims(len: usize, mask: &[bool], width: usize, height: usize) -> Result<()> {
    if len != width * height || mask.len() != width * height {
        return Err(Error::InvalidInput(format!(
            "field of {} and mask of {} pixels for a {}x{} image",
            len,
            mask.len(),
            width,
            height
        )));
    }
    Ok(())
}

/// Mean of `term(a, b)` over horizontally and vertically adjacent pairs with both
/// endpoints masked; zero when no such pair exists.
fn masked_pair_mean<T>(
    field: &[T],
    mask: &[bool],
    width: usize,
    height: usize,
    term: impl Fn(&T, &T) -> f64,
) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..height {
        for x in 0..width {
            let k = y * width + x;
            if !mask[k] {
                continue;
            }
            if x + 1 < width && mask[k + 1] {
                sum += term(&field[k], &field[k + 1]);
                pairs += 1;
            }
            if y + 1 < height && mask[k + width] {
                sum += term(&field[k], &field[k + width]);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Total variation of a scalar or vector field over masked adjacent pairs.
pub fn tv_loss<T: FieldValue>(
    field: &[T],
    mask: &[bool],
    width: usize,
    height: usize,
    kind: TvKind,
) -> Result<f64> {
    check_dims(field.len(), mask, width, height)?;
    Ok(match kind {
        TvKind::Squared => masked_pair_mean(field, mask, width, height, |a, b| a.squared_distance(b)),
        TvKind::Absolute => masked_pair_mean(field, mask, width, height, |a, b| a.squared_distance(b).sqrt()),
    })
}

/// Mean of `1 - <n_a, n_b>` over masked adjacent pairs.
pub fn normal_smooth_loss(normals: &[Vec3], mask: &[bool], width: usize, height: usize) -> Result<f64> {
    check_dims(normals.len(), mask, width, height)?;
    Ok(masked_pair_mean(normals, mask, width, height, |a, b| 1.0 - a.dot(b)))
}

/// Inputs handed to a guidance term once per optimizer iteration.
pub struct GuidanceContext<'a> {
    pub scene: &'a Scene,
    pub buffers: &'a RenderBuffers,
    pub camera: &'a CameraModel,
    pub prompt: &'a str,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceOutput {
    pub loss: f64,
    /// One gradient per scene instance.
    pub gradients: Vec<TransformGrad>,
}

impl GuidanceOutput {
    pub fn zero(instances: usize) -> Self {
        Self {
            loss: 0.0,
            gradients: vec![TransformGrad::zero(); instances],
        }
    }
}

/// A loss evaluated on rendered views that also reports its gradient with
/// respect to the instance transforms. Score-distillation adapters plug in here.
pub trait GuidanceTerm: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceOutput>;

    /// Whether `evaluate` reads `ctx.buffers`; when false the caller may pass empty buffers.
    fn needs_render(&self) -> bool {
        true
    }
}

/// Contributes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubZero;

impl GuidanceTerm for StubZero {
    fn name(&self) -> &str {
        "stub-zero"
    }

    fn needs_render(&self) -> bool {
        false
    }

    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceOutput> {
        Ok(GuidanceOutput::zero(ctx.scene.len()))
    }
}

/// Feature-level reference loss exposed through the guidance interface, with
/// central finite-difference gradients.
pub struct ReferenceFeatureGuidance {
    pub reference: FeatureVec,
    pub lambda: f64,
    pub step: f64,
    pub extractor: Arc<dyn FeatureExtractor>,
}

impl GuidanceTerm for ReferenceFeatureGuidance {
    fn name(&self) -> &str {
        "reference-feature"
    }

    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceOutput> {
        let feature = self.extractor.extract(ctx.buffers)?;
        let loss = reference_loss(&self.reference, &feature, self.lambda)?;
        let probe = crate::optimizer::FeatureProbe {
            reference: &self.reference,
            extractor: self.extractor.as_ref(),
            camera: ctx.camera,
            lambda: self.lambda,
        };
        let gradients = (0..ctx.scene.len())
            .map(|i| crate::optimizer::feature_loss_gradient(ctx.scene, &probe, i, self.step))
            .collect::<Result<Vec<_>>>()?;
        Ok(GuidanceOutput { loss, gradients })
    }
}

/// Wraps a closure as a guidance term.
pub struct FnGuidance<F> {
    name: String,
    f: F,
}

impl<F> FnGuidance<F>
where
    F: Fn(&GuidanceContext<'_>) -> Result<GuidanceOutput> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> GuidanceTerm for FnGuidance<F>
where
    F: Fn(&GuidanceContext<'_>) -> Result<GuidanceOutput> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceOutput> {
        (self.f)(ctx)
    }
}
