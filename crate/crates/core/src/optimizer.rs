//! Collision-aware layout refinement and the instance-refinement scaffolding.
//!
//! Layout refinement minimizes `L_guidance + L_feat + L_col` (each term already
//! carrying its weight) over per-instance rotation and translation by gradient
//! descent with per-parameter learning rates. Scale stays fixed. Collision
//! gradients are analytic, feature-loss gradients come from central finite
//! differences through the rasterizer, and the guidance term reports its own.
//!
//! Translation `x`/`y` learning rates are tiny compared to `z`: the in-plane
//! position is already pinned by the 2D layout, while depth is the coordinate
//! collisions are expected to correct.

use std::fmt::Write as _;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::collision::{collision_loss_scene, CollisionOptions, Subsample};
use crate::error::{Error, Result};
use crate::guidance::{
    normal_smooth_loss, reference_loss, tv_loss, FeatureExtractor, FeatureVec, GuidanceContext,
    GuidanceTerm, TimestepSchedule, TvKind,
};
use crate::raster::{render, CameraModel, RenderBuffers, LOSS_RESOLUTION};
use crate::scene::{compose_scene, InstanceTransform, Scene, TransformGrad, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutLearningRates {
    pub quaternion: f64,
    pub translation_x: f64,
    pub translation_y: f64,
    pub translation_z: f64,
}

impl Default for LayoutLearningRates {
    fn default() -> Self {
        Self {
            quaternion: 0.0001,
            translation_x: 0.00002,
            translation_y: 0.00002,
            translation_z: 0.02,
        }
    }
}

impl LayoutLearningRates {
    fn translation(&self) -> [f64; 3] {
        [self.translation_x, self.translation_y, self.translation_z]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutOptConfig {
    pub iterations: usize,
    pub learning_rates: LayoutLearningRates,
    pub lambda_feat: f64,
    pub lambda_col: f64,
    /// Visit both orderings of every instance pair in the collision loss.
    pub symmetric_collision: bool,
    pub frozen_anchor: bool,
    /// Per-instance point budget for the collision loss; `None` uses every point.
    pub collision_max_points: Option<usize>,
    /// Finite-difference step for the feature-loss gradient.
    pub fd_step: f64,
    pub resolution: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for LayoutOptConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rates: LayoutLearningRates::default(),
            lambda_feat: 10.0,
            lambda_col: 0.2,
            symmetric_collision: true,
            frozen_anchor: false,
            collision_max_points: None,
            fd_step: 1e-3,
            resolution: LOSS_RESOLUTION,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl LayoutOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        let lr = &self.learning_rates;
        if [lr.quaternion, lr.translation_x, lr.translation_y, lr.translation_z]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidInput("learning rates must be nonnegative".into()));
        }
        if !(self.lambda_feat >= 0.0 && self.lambda_col >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be nonnegative".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidInput("finite-difference step must be positive".into()));
        }
        Ok(())
    }

    pub fn collision_options(&self) -> CollisionOptions {
        CollisionOptions {
            lambda: self.lambda_col,
            symmetric: self.symmetric_collision,
            frozen_anchor: self.frozen_anchor,
            subsample: self.collision_max_points.map(|max_points| Subsample {
                max_points,
                seed: self.seed,
            }),
        }
    }
}

/// Loss components at one iteration, evaluated before that iteration's step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total: f64,
    pub ssds: f64,
    pub feat: f64,
    pub col: f64,
    pub transforms: Vec<InstanceTransform>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
    pub final_transforms: Vec<InstanceTransform>,
}

impl OptTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `iteration,total,ssds,feat,col` rows with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total,ssds,feat,col\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.iteration, r.total, r.ssds, r.feat, r.col);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Reference data for the feature loss.
pub struct FeatureProbe<'a> {
    pub reference: &'a FeatureVec,
    pub extractor: &'a dyn FeatureExtractor,
    pub camera: &'a CameraModel,
    pub lambda: f64,
}

impl FeatureProbe<'_> {
    /// Weighted feature loss of `scene` rendered by the probe camera.
    pub fn loss(&self, scene: &Scene) -> Result<f64> {
        let buffers = render(&compose_scene(scene)?, self.camera)?;
        self.loss_from_buffers(&buffers)
    }

    pub fn loss_from_buffers(&self, buffers: &RenderBuffers) -> Result<f64> {
        let f = self.extractor.extract(buffers)?;
        reference_loss(self.reference, &f, self.lambda)
    }
}

/// Applies a world-frame rotation increment `exp(omega)` followed by renormalization.
pub fn rotate_by(rotation: &UnitQuaternion<f64>, omega: &Vec3) -> UnitQuaternion<f64> {
    if omega.iter().all(|v| *v == 0.0) {
        return *rotation;
    }
    let q = UnitQuaternion::from_scaled_axis(*omega) * rotation;
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Central finite differences of the feature loss for instance `index` over
/// its rotation tangent (radians) and translation. Scale is not perturbed.
pub fn feature_loss_gradient(scene: &Scene, probe: &FeatureProbe<'_>, index: usize, step: f64) -> Result<TransformGrad> {
    if index >= scene.len() {
        return Err(Error::InvalidInput(format!("no instance {index}")));
    }
    let base = scene.transforms();
    let eval = |perturb: &dyn Fn(&mut InstanceTransform)| -> Result<f64> {
        let mut xfs = base.clone();
        perturb(&mut xfs[index]);
        probe.loss(&scene.with_transforms(&xfs)?)
    };
    let mut grad = TransformGrad::zero();
    for axis in 0..3 {
        let mut e = Vec3::zeros();
        e[axis] = step;
        let plus = eval(&|xf| xf.rotation = rotate_by(&xf.rotation, &e))?;
        let minus = eval(&|xf| xf.rotation = rotate_by(&xf.rotation, &-e))?;
        grad.rotation[axis] = (plus - minus) / (2.0 * step);
        let plus = eval(&|xf| xf.translation[axis] += step)?;
        let minus = eval(&|xf| xf.translation[axis] -= step)?;
        grad.translation[axis] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// What layout refinement optimizes against besides collisions.
pub struct RefineInputs<'a> {
    /// Masked reference feature; required when `lambda_feat > 0`.
    pub reference: Option<&'a FeatureVec>,
    pub extractor: &'a dyn FeatureExtractor,
    pub guidance: &'a dyn GuidanceTerm,
    pub prompt: &'a str,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub scene: Scene,
    pub trace: OptTrace,
}

/// Refinement stopped early; `trace` holds every completed iteration.
#[derive(Debug, thiserror::Error)]
#[error("layout refinement aborted: {source}")]
pub struct RefineError {
    #[source]
    pub source: Error,
    pub trace: OptTrace,
}

impl From<RefineError> for Error {
    fn from(e: RefineError) -> Self {
        e.source
    }
}

/// Loss terms of the layout objective at the current transforms.
#[derive(Clone, Debug)]
pub struct LayoutEvaluation {
    pub ssds: f64,
    pub feat: f64,
    pub col: f64,
    pub gradients: Vec<TransformGrad>,
}

impl LayoutEvaluation {
    pub fn total(&self) -> f64 {
        self.ssds + self.feat + self.col
    }
}

/// Evaluates every layout loss term and the combined per-instance gradient.
pub fn evaluate_layout(
    scene: &Scene,
    inputs: &RefineInputs<'_>,
    cfg: &LayoutOptConfig,
    iteration: usize,
) -> Result<LayoutEvaluation> {
    let camera = CameraModel::reference_view(cfg.resolution)?;
    let use_feat = cfg.lambda_feat > 0.0;
    let buffers = if use_feat || inputs.guidance.needs_render() {
        render(&compose_scene(scene)?, &camera)?
    } else {
        RenderBuffers::empty(camera.width, camera.height, camera.focal_px())
    };

    let report = collision_loss_scene(scene, &cfg.collision_options())?;
    let mut gradients = report.gradients;

    let mut feat = 0.0;
    if use_feat {
        let reference = inputs
            .reference
            .ok_or_else(|| Error::InvalidInput("feature loss weight is positive but no reference feature".into()))?;
        let probe = FeatureProbe {
            reference,
            extractor: inputs.extractor,
            camera: &camera,
            lambda: cfg.lambda_feat,
        };
        feat = probe.loss_from_buffers(&buffers)?;
        for (i, g) in gradients.iter_mut().enumerate() {
            g.add_assign(&feature_loss_gradient(scene, &probe, i, cfg.fd_step)?);
        }
    }

    let guided = inputs.guidance.evaluate(&GuidanceContext {
        scene,
        buffers: &buffers,
        camera: &camera,
        prompt: inputs.prompt,
        iteration,
    })?;
    if guided.gradients.len() != scene.len() {
        return Err(Error::InvalidInput(format!(
            "guidance {:?} returned {} gradients for {} instances",
            inputs.guidance.name(),
            guided.gradients.len(),
            scene.len()
        )));
    }
    for (g, h) in gradients.iter_mut().zip(&guided.gradients) {
        g.add_assign(h);
    }
    Ok(LayoutEvaluation {
        ssds: guided.loss,
        feat,
        col: report.total,
        gradients,
    })
}

#[derive(Clone, Debug, Default)]
struct AdamMoments {
    m: [f64; 6],
    v: [f64; 6],
}

/// Runs layout refinement for `cfg.iterations` steps.
pub fn refine_layout(
    scene: &Scene,
    inputs: &RefineInputs<'_>,
    cfg: &LayoutOptConfig,
) -> std::result::Result<RefineOutcome, RefineError> {
    let mut trace = OptTrace::default();
    let fail = |source: Error, trace: OptTrace| RefineError { source, trace };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, trace));
    }
    let mut current = scene.clone();
    let lr = cfg.learning_rates;
    let lr_t = lr.translation();
    let mut moments = vec![AdamMoments::default(); scene.len()];

    for iteration in 0..cfg.iterations {
        let eval = match evaluate_layout(&current, inputs, cfg, iteration) {
            Ok(e) => e,
            Err(e) => return Err(fail(e, trace)),
        };
        let total = eval.total();
        if !total.is_finite() || eval.gradients.iter().any(|g| !g.is_finite()) {
            return Err(fail(Error::NonFiniteLoss(iteration), trace));
        }
        trace.records.push(TraceRecord {
            iteration,
            total,
            ssds: eval.ssds,
            feat: eval.feat,
            col: eval.col,
            transforms: current.transforms(),
        });

        let mut next = current.transforms();
        for (i, (xf, g)) in next.iter_mut().zip(&eval.gradients).enumerate() {
            // step[0..3]: rotation tangent, step[3..6]: translation
            let mut step = [0.0; 6];
            let raw = [
                g.rotation[0],
                g.rotation[1],
                g.rotation[2],
                g.translation[0],
                g.translation[1],
                g.translation[2],
            ];
            let rates = [lr.quaternion, lr.quaternion, lr.quaternion, lr_t[0], lr_t[1], lr_t[2]];
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for k in 0..6 {
                        step[k] = rates[k] * raw[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let state = &mut moments[i];
                    let t = (iteration + 1) as i32;
                    for k in 0..6 {
                        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * raw[k];
                        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * raw[k] * raw[k];
                        let m_hat = state.m[k] / (1.0 - beta1.powi(t));
                        let v_hat = state.v[k] / (1.0 - beta2.powi(t));
                        if raw[k] != 0.0 || state.m[k] != 0.0 {
                            step[k] = rates[k] * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
            for k in 0..3 {
                xf.translation[k] -= step[3 + k];
            }
            xf.rotation = rotate_by(&xf.rotation, &-Vec3::new(step[0], step[1], step[2]));
            let norm = xf.rotation.quaternion().norm();
            assert!((norm - 1.0).abs() <= 1e-9, "quaternion norm {norm} after step");
        }
        if let Err(e) = current.set_transforms(&next) {
            return Err(fail(e, trace));
        }
    }
    trace.final_transforms = current.transforms();
    Ok(RefineOutcome { scene: current, trace })
}

/// Learning-rate schedule given as `[start, initial, final, end]`: constant
/// `initial` up to `start`, exponential interpolation to `final` at `end`,
/// constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    Exponential([f64; 4]),
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        match *self {
            LrSchedule::Constant(v) => v,
            LrSchedule::Exponential([start, initial, fin, end]) => {
                let it = iteration as f64;
                if it <= start || end <= start {
                    initial
                } else if it >= end {
                    fin
                } else {
                    let s = (it - start) / (end - start);
                    (initial.ln() * (1.0 - s) + fin.ln() * s).exp()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineProfile {
    Short,
    Extended,
}

impl std::str::FromStr for RefineProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(RefineProfile::Short),
            "extended" => Ok(RefineProfile::Extended),
            other => Err(Error::InvalidInput(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifySchedule {
    pub interval: usize,
    pub start: usize,
    pub until: usize,
}

impl DensifySchedule {
    pub fn fires_at(&self, iteration: usize) -> bool {
        self.interval > 0 && iteration.is_multiple_of(self.interval) && (self.start..self.until).contains(&iteration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRefineConfig {
    pub profile: RefineProfile,
    pub total_iterations: usize,
    pub schedule: TimestepSchedule,
    pub lambda_smooth: f64,
    pub lambda_tv: f64,
    pub tv_kind: TvKind,
    pub densify: DensifySchedule,
    /// `(first iteration, resolution)` pairs in increasing iteration order.
    pub resolution_milestones: Vec<(usize, usize)>,
    pub position_lr: LrSchedule,
    pub scale_lr: f64,
    pub feature_lr: LrSchedule,
    pub opacity_lr: f64,
    pub rotation_lr: f64,
    pub batch_size: usize,
}

impl InstanceRefineConfig {
    /// 1500 iterations, resolution 256 then 512 from iteration 800.
    pub fn short() -> Self {
        Self {
            profile: RefineProfile::Short,
            total_iterations: 1500,
            schedule: TimestepSchedule::two_phase(1500),
            lambda_smooth: 1.0,
            lambda_tv: 0.2,
            tv_kind: TvKind::Squared,
            densify: DensifySchedule {
                interval: 100,
                start: 300,
                until: 900,
            },
            resolution_milestones: vec![(0, 256), (800, 512)],
            position_lr: LrSchedule::Exponential([0.0, 0.0005, 0.00005, 500.0]),
            scale_lr: 0.005,
            feature_lr: LrSchedule::Constant(0.01),
            opacity_lr: 0.01,
            rotation_lr: 0.001,
            batch_size: 1,
        }
    }

    /// 2000 iterations at resolution 512.
    pub fn extended() -> Self {
        Self {
            profile: RefineProfile::Extended,
            total_iterations: 2000,
            schedule: TimestepSchedule::two_phase(2000),
            lambda_smooth: 1.0,
            lambda_tv: 0.2,
            tv_kind: TvKind::Squared,
            densify: DensifySchedule {
                interval: 200,
                start: 400,
                until: 1600,
            },
            resolution_milestones: vec![(0, 512)],
            position_lr: LrSchedule::Exponential([0.0, 0.0005, 0.00002, 1000.0]),
            scale_lr: 0.005,
            feature_lr: LrSchedule::Exponential([0.0, 0.01, 0.005, 2000.0]),
            opacity_lr: 0.05,
            rotation_lr: 0.005,
            batch_size: 4,
        }
    }

    pub fn for_profile(profile: RefineProfile) -> Self {
        match profile {
            RefineProfile::Short => Self::short(),
            RefineProfile::Extended => Self::extended(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.schedule.phases[0].iters[0] != 0 || self.schedule.end() < self.total_iterations {
            return Err(Error::InvalidInput(format!(
                "timestep schedule does not cover [0, {})",
                self.total_iterations
            )));
        }
        if self.densify.start > self.total_iterations || self.densify.until > self.total_iterations {
            return Err(Error::InvalidInput("densify markers exceed the iteration count".into()));
        }
        if self.resolution_milestones.first().map(|m| m.0) != Some(0) {
            return Err(Error::InvalidInput("resolution milestones must start at iteration 0".into()));
        }
        Ok(())
    }

    pub fn resolution_at(&self, iteration: usize) -> usize {
        self.resolution_milestones
            .iter()
            .take_while(|(start, _)| *start <= iteration)
            .last()
            .map_or(0, |m| m.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub iteration: usize,
    pub t_range: [f64; 2],
    pub densify_prune: bool,
    pub resolution: usize,
    pub position_lr: f64,
}

/// One entry per iteration of instance refinement.
pub fn refinement_plan(cfg: &InstanceRefineConfig) -> Result<Vec<PlanEntry>> {
    cfg.validate()?;
    (0..cfg.total_iterations)
        .map(|iteration| {
            Ok(PlanEntry {
                iteration,
                t_range: cfg.schedule.phase_at(iteration)?.t,
                densify_prune: cfg.densify.fires_at(iteration),
                resolution: cfg.resolution_at(iteration),
                position_lr: cfg.position_lr.at(iteration),
            })
        })
        .collect()
}

/// Terms of the instance-refinement objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceLossTerms {
    pub guidance: f64,
    pub smooth: f64,
    pub tv_depth: f64,
    pub tv_normal: f64,
    pub total: f64,
}

pub fn instance_loss_terms(buffers: &RenderBuffers, cfg: &InstanceRefineConfig, guidance: f64) -> Result<InstanceLossTerms> {
    let (w, h) = (buffers.width, buffers.height);
    let mask = &buffers.silhouette;
    let smooth = normal_smooth_loss(&buffers.normal, mask, w, h)?;
    let tv_depth = tv_loss(&buffers.depth, mask, w, h, cfg.tv_kind)?;
    let tv_normal = tv_loss(&buffers.normal, mask, w, h, cfg.tv_kind)?;
    Ok(InstanceLossTerms {
        guidance,
        smooth,
        tv_depth,
        tv_normal,
        total: guidance + cfg.lambda_smooth * smooth + cfg.lambda_tv * (tv_depth + tv_normal),
    })
}

/// `guidance + lambda_smooth * L_smooth + lambda_tv * (TV(depth) + TV(normal))`,
/// all regularizers masked by the silhouette.
pub fn assemble_instance_loss(buffers: &RenderBuffers, cfg: &InstanceRefineConfig, guidance: f64) -> Result<f64> {
    Ok(instance_loss_terms(buffers, cfg, guidance)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{SilhouetteDepthDescriptor, StubZero};
    use crate::scene::{GaussianCloud, Instance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        while pts.len() < n {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                pts.push(p);
            }
        }
        GaussianCloud::from_points(pts, 0.03).unwrap()
    }

    fn at(x: f64, y: f64, z: f64) -> InstanceTransform {
        InstanceTransform::new(1.0, UnitQuaternion::identity(), Vec3::new(x, y, z)).unwrap()
    }

    fn stub_inputs<'a>() -> RefineInputs<'a> {
        RefineInputs {
            reference: None,
            extractor: &SilhouetteDepthDescriptor,
            guidance: &StubZero,
            prompt: "",
        }
    }

    #[test]
    fn non_overlapping_scene_is_unchanged() {
        let scene = Scene::new(vec![
            Instance::new("a", "a", ball(1, 60)).with_transform(at(-3.0, 0.0, 0.0)),
            Instance::new("b", "b", ball(2, 60)).with_transform(at(3.0, 0.0, 0.0)),
        ])
        .unwrap();
        let cfg = LayoutOptConfig {
            iterations: 20,
            lambda_feat: 0.0,
            ..LayoutOptConfig::default()
        };
        let out = refine_layout(&scene, &stub_inputs(), &cfg).unwrap();
        assert_eq!(out.scene, scene);
        assert_eq!(out.trace.len(), 20);
    }

    #[test]
    fn zero_weights_are_a_no_op() {
        let scene = Scene::new(vec![
            Instance::new("a", "a", ball(1, 60)).with_transform(at(0.0, 0.0, 0.0)),
            Instance::new("b", "b", ball(2, 60)).with_transform(at(0.3, 0.0, 0.1)),
        ])
        .unwrap();
        let cfg = LayoutOptConfig {
            iterations: 10,
            lambda_feat: 0.0,
            lambda_col: 0.0,
            ..LayoutOptConfig::default()
        };
        let out = refine_layout(&scene, &stub_inputs(), &cfg).unwrap();
        assert_eq!(out.scene.transforms(), scene.transforms());
        assert!(out.trace.records.iter().all(|r| r.total == 0.0));
    }

    #[test]
    fn default_config_matches_published_values() {
        let cfg = LayoutOptConfig::default();
        assert_eq!(cfg.iterations, 400);
        assert_eq!(cfg.learning_rates.quaternion, 0.0001);
        assert_eq!(cfg.learning_rates.translation_x, 0.00002);
        assert_eq!(cfg.learning_rates.translation_y, 0.00002);
        assert_eq!(cfg.learning_rates.translation_z, 0.02);
        assert_eq!((cfg.lambda_feat, cfg.lambda_col), (10.0, 0.2));
        let short = InstanceRefineConfig::short();
        assert_eq!((short.lambda_smooth, short.lambda_tv), (1.0, 0.2));
    }

    #[test]
    fn missing_reference_with_feature_weight_fails() {
        let scene = Scene::new(vec![Instance::new("a", "a", ball(1, 20))]).unwrap();
        let cfg = LayoutOptConfig {
            iterations: 1,
            resolution: 32,
            ..LayoutOptConfig::default()
        };
        let err = refine_layout(&scene, &stub_inputs(), &cfg).unwrap_err();
        assert!(err.trace.is_empty());
        assert!(matches!(err.source, Error::InvalidInput(_)));
    }

    #[test]
    fn non_finite_guidance_aborts_with_partial_trace() {
        use crate::guidance::{FnGuidance, GuidanceOutput};
        let guidance = FnGuidance::new("nan-after-3", |ctx: &GuidanceContext<'_>| {
            let mut out = GuidanceOutput::zero(ctx.scene.len());
            if ctx.iteration >= 3 {
                out.loss = f64::NAN;
            }
            Ok(out)
        });
        let scene = Scene::new(vec![Instance::new("a", "a", ball(1, 20))]).unwrap();
        let cfg = LayoutOptConfig {
            iterations: 10,
            lambda_feat: 0.0,
            resolution: 16,
            ..LayoutOptConfig::default()
        };
        let inputs = RefineInputs {
            guidance: &guidance,
            ..stub_inputs()
        };
        let err = refine_layout(&scene, &inputs, &cfg).unwrap_err();
        assert_eq!(err.trace.len(), 3);
        assert!(matches!(err.source, Error::NonFiniteLoss(3)));
    }

    #[test]
    fn adam_variant_separates_spheres() {
        let scene = Scene::new(vec![
            Instance::new("a", "a", ball(1, 80)).with_transform(at(0.0, 0.0, 0.0)),
            Instance::new("b", "b", ball(2, 80)).with_transform(at(0.0, 0.0, 0.5)),
        ])
        .unwrap();
        let cfg = LayoutOptConfig {
            iterations: 60,
            lambda_feat: 0.0,
            optimizer: OptimizerKind::adam(),
            ..LayoutOptConfig::default()
        };
        let out = refine_layout(&scene, &stub_inputs(), &cfg).unwrap();
        let first = out.trace.records.first().unwrap().col;
        let last = out.trace.records.last().unwrap().col;
        assert!(last < first);
    }

    #[test]
    fn lr_schedule_interpolates_exponentially() {
        let s = LrSchedule::Exponential([0.0, 0.0005, 0.00005, 500.0]);
        assert_eq!(s.at(0), 0.0005);
        assert!((s.at(250) - (0.0005f64 * 0.00005).sqrt()).abs() < 1e-15);
        assert_eq!(s.at(500), 0.00005);
        assert_eq!(s.at(1400), 0.00005);
        assert_eq!(LrSchedule::Constant(0.01).at(77), 0.01);
    }

    #[test]
    fn plan_short_profile() {
        let plan = refinement_plan(&InstanceRefineConfig::short()).unwrap();
        assert_eq!(plan.len(), 1500);
        assert!(plan[300].densify_prune);
        assert_eq!(plan[300].t_range, [0.10, 0.50]);
        assert!(!plan[950].densify_prune);
        assert_eq!(plan[950].t_range, [0.02, 0.75]);
        assert_eq!(plan[799].t_range, [0.10, 0.50]);
        assert_eq!(plan[800].t_range, [0.02, 0.75]);
        assert_eq!((plan[799].resolution, plan[800].resolution), (256, 512));
        let multiples = (300..900).filter(|i| i % 100 == 0).count();
        assert_eq!(plan.iter().filter(|e| e.densify_prune).count(), multiples);
        assert_eq!(multiples, 6);
    }

    #[test]
    fn plan_extended_profile() {
        let plan = refinement_plan(&InstanceRefineConfig::extended()).unwrap();
        assert_eq!(plan.len(), 2000);
        let flags: Vec<usize> = plan.iter().filter(|e| e.densify_prune).map(|e| e.iteration).collect();
        assert_eq!(flags, vec![400, 600, 800, 1000, 1200, 1400]);
        assert!(plan.iter().all(|e| e.resolution == 512));
    }

    #[test]
    fn plan_rejects_uncovered_schedule() {
        let mut cfg = InstanceRefineConfig::short();
        cfg.schedule = TimestepSchedule::two_phase(1000);
        assert!(refinement_plan(&cfg).is_err());
    }

    fn square_buffers() -> RenderBuffers {
        let (w, h) = (32, 32);
        let mut depth = vec![f64::INFINITY; w * h];
        for y in 8..24 {
            for x in 8..24 {
                depth[y * w + x] = 2.0;
            }
        }
        RenderBuffers::from_depth(w, h, 38.6, depth).unwrap()
    }

    #[test]
    fn instance_loss_flat_square_is_zero() {
        let cfg = InstanceRefineConfig::short();
        assert_eq!(assemble_instance_loss(&square_buffers(), &cfg, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn instance_loss_is_linear_in_guidance() {
        let cfg = InstanceRefineConfig::short();
        let mut b = square_buffers();
        b.depth[10 * 32 + 10] = 2.3;
        let b = crate::raster::normals_from_depth(&b);
        let r = assemble_instance_loss(&b, &cfg, 0.0).unwrap();
        assert!(r > 0.0);
        assert!((assemble_instance_loss(&b, &cfg, 5.0).unwrap() - (5.0 + r)).abs() < 1e-12);
        let t = instance_loss_terms(&b, &cfg, 0.0).unwrap();
        assert_eq!(t.total, t.smooth + 0.2 * (t.tv_depth + t.tv_normal));
    }
}
