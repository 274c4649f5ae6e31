//! Deterministic fixtures shared by the benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compolayout::{GaussianCloud, Instance, InstanceTransform, Scene, Vec3};

/// `n` points uniform in the unit ball.
pub fn ball(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if p.norm() <= 1.0 {
            pts.push(p);
        }
    }
    GaussianCloud::from_points(pts, 0.02).expect("finite points")
}

/// `instances` overlapping balls of `points` each, spaced 0.6 apart along x.
pub fn overlapping_scene(instances: usize, points: usize) -> Scene {
    let list = (0..instances)
        .map(|i| {
            let t = InstanceTransform {
                scale: 0.5,
                translation: Vec3::new(0.6 * i as f64 - 0.3 * (instances - 1) as f64, 0.0, 0.05 * i as f64),
                ..InstanceTransform::identity()
            };
            Instance::new(i.to_string(), "ball", ball(i as u64, points)).with_transform(t)
        })
        .collect();
    Scene::new(list).expect("unique ids")
}
