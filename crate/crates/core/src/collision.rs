//! Tolerant collision loss between instances and its analytic gradient.
//!
//! For an anchor cloud `P1` with centroid `c` and mean sparsity `R` (mean
//! distance of its points to `c`), an intruder cloud `P2` pays
//! `lambda * sum_k relu(R - |p2_k - c|)`: only points that reach inside the
//! anchor's mean radius are penalized, so shallow contact is free.
//!
//! At scene level the pair loss is summed over ordered pairs `(i, j)`, `i != j`,
//! visited in lexicographic order.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{apply_transform, centroid, InstanceTransform, Scene, TransformGrad, Vec3};

/// Default per-instance point budget in subsampling mode.
pub const DEFAULT_MAX_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub max_points: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionOptions {
    /// Collision weight.
    pub lambda: f64,
    /// Include both `(i, j)` and `(j, i)`; otherwise only `i < j` with `i` as anchor.
    pub symmetric: bool,
    /// Treat each anchor's centroid and mean sparsity as constants.
    pub frozen_anchor: bool,
    pub subsample: Option<Subsample>,
}

impl Default for CollisionOptions {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            symmetric: true,
            frozen_anchor: false,
            subsample: None,
        }
    }
}

impl CollisionOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub anchor: usize,
    pub intruder: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub pairs: Vec<PairLoss>,
    pub total: f64,
    pub gradients: Vec<TransformGrad>,
}

/// Mean distance of the points to their coordinate mean.
pub fn mean_sparsity(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let c = centroid(points);
    points.iter().map(|p| (p - c).norm()).sum::<f64>() / points.len() as f64
}

/// Loss paid by `intruder` for entering the mean-sparsity ball of `anchor`.
pub fn collision_loss_pair(anchor: &[Vec3], intruder: &[Vec3], lambda: f64) -> f64 {
    if anchor.is_empty() || intruder.is_empty() {
        return 0.0;
    }
    let c = centroid(anchor);
    let r = mean_sparsity(anchor);
    lambda
        * intruder
            .iter()
            .map(|p| (r - (p - c).norm()).max(0.0))
            .sum::<f64>()
}

/// Ordered pairs visited by the scene loss, in summation order.
pub fn scene_pairs(n: usize, symmetric: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && (symmetric || i < j) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// World-space points of every instance, subsampled when requested.
pub fn world_points(scene: &Scene, subsample: Option<Subsample>) -> Result<Vec<Vec<Vec3>>> {
    scene
        .instances()
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let cloud = match subsample {
                Some(s) if inst.cloud.len() > s.max_points => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut idx = index::sample(&mut rng, inst.cloud.len(), s.max_points).into_vec();
                    idx.sort_unstable();
                    inst.cloud.select(&idx)?
                }
                _ => inst.cloud.clone(),
            };
            Ok(apply_transform(&cloud, &inst.transform)?.points().to_vec())
        })
        .collect()
}

/// Scene loss with per-pair values and per-instance gradients.
pub fn collision_loss_scene(scene: &Scene, opts: &CollisionOptions) -> Result<CollisionReport> {
    let points = world_points(scene, opts.subsample)?;
    let transforms = scene.transforms();
    let mut pairs = Vec::new();
    let mut gradients = vec![TransformGrad::zero(); scene.len()];
    let mut total = 0.0;
    let stats: Vec<(Vec3, f64)> = points.iter().map(|p| (centroid(p), mean_sparsity(p))).collect();
    for (i, j) in scene_pairs(scene.len(), opts.symmetric) {
        let (loss, g_anchor, g_intruder) = pair_with_grad(
            stats[i],
            &transforms[i],
            &points[j],
            &transforms[j],
            opts,
        );
        if !(g_anchor.is_finite() && g_intruder.is_finite() && loss.is_finite()) {
            return Err(Error::NonFiniteGradient {
                anchor: i,
                intruder: j,
            });
        }
        gradients[i].add_assign(&g_anchor);
        gradients[j].add_assign(&g_intruder);
        total += loss;
        pairs.push(PairLoss {
            anchor: i,
            intruder: j,
            loss,
        });
    }
    Ok(CollisionReport {
        pairs,
        total,
        gradients,
    })
}

/// Per-instance gradient of the scene collision loss.
pub fn collision_grad(scene: &Scene, opts: &CollisionOptions) -> Result<Vec<TransformGrad>> {
    Ok(collision_loss_scene(scene, opts)?.gradients)
}

/// Loss of one ordered pair and its gradients for the anchor and the intruder.
fn pair_with_grad(
    (c, r): (Vec3, f64),
    anchor_xf: &InstanceTransform,
    intruder: &[Vec3],
    intruder_xf: &InstanceTransform,
    opts: &CollisionOptions,
) -> (f64, TransformGrad, TransformGrad) {
    let lambda = opts.lambda;
    let mut loss = 0.0;
    let mut active = 0usize;
    // sum of unit directions from the anchor centroid to active intruder points
    let mut dir_sum = Vec3::zeros();
    let mut torque = Vec3::zeros();
    let mut radial = 0.0;
    for p in intruder {
        let offset = p - c;
        let d = offset.norm();
        let gap = r - d;
        if gap <= 0.0 {
            continue;
        }
        loss += gap;
        active += 1;
        let u = if d > 0.0 { offset / d } else { Vec3::zeros() };
        dir_sum += u;
        let lever = p - intruder_xf.translation;
        // d loss / d p = -lambda * u
        torque += lever.cross(&(-lambda * u));
        radial += u.dot(&lever);
    }
    let loss = lambda * loss;
    if active == 0 {
        return (loss, TransformGrad::zero(), TransformGrad::zero());
    }
    let intruder_grad = TransformGrad {
        scale: -lambda * radial / intruder_xf.scale,
        rotation: torque.into(),
        translation: (-lambda * dir_sum).into(),
    };
    let anchor_grad = if opts.frozen_anchor {
        TransformGrad::zero()
    } else {
        // c = s R q_mean + t and R_sparsity = s * R_canonical
        let lever = c - anchor_xf.translation;
        let dl_dc = lambda * dir_sum;
        TransformGrad {
            scale: (lambda * active as f64 * r + dl_dc.dot(&lever)) / anchor_xf.scale,
            rotation: lever.cross(&dl_dc).into(),
            translation: dl_dc.into(),
        }
    };
    (loss, anchor_grad, intruder_grad)
}
