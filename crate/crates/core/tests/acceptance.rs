//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::time::{Duration, Instant};

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compolayout::collision::{collision_grad, collision_loss_scene, CollisionOptions};
use compolayout::guidance::{
    normal_smooth_loss, sample_timestep, tv_loss, FeatureExtractor, SilhouetteDepthDescriptor, StubZero,
    TimestepSchedule, TvKind,
};
use compolayout::io::{
    interpret_row, load_scene_file, parse_layout_spec, read_ply, save_scene_file, write_ply, LoadMode,
    PlyFormat, RowInterpretation, SceneEntry, SceneFile,
};
use compolayout::layout::{
    build_pose_grid, estimate_rotation, init_depth_z, init_depths, init_scale, init_translation_xy, DepthInput,
};
use compolayout::optimizer::{refine_layout, LayoutOptConfig, RefineInputs};
use compolayout::raster::{render, CameraModel, POSE_SEARCH_RESOLUTION};
use compolayout::{
    normalize_cloud, BBox2D, Canvas, GaussianCloud, Instance, InstanceTransform, Scene, TransformGrad, Vec3,
};

struct Outcome {
    pass: bool,
    detail: String,
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "collision loss matches the naive double loop",
            budget: Some(Duration::from_secs(10)),
            run: collision_oracle,
        },
        Criterion {
            id: 2,
            name: "analytic collision gradients match central differences",
            budget: Some(Duration::from_secs(60)),
            run: gradient_check,
        },
        Criterion {
            id: 3,
            name: "layout refinement separates two overlapping spheres",
            budget: Some(Duration::from_secs(30)),
            run: two_spheres,
        },
        Criterion {
            id: 4,
            name: "pose grid search recovers reference poses",
            budget: Some(Duration::from_secs(120)),
            run: pose_recovery,
        },
        Criterion {
            id: 5,
            name: "sampled timesteps conform to the two-phase schedule",
            budget: Some(Duration::from_secs(1)),
            run: schedule_conformance,
        },
        Criterion {
            id: 6,
            name: "regularizer closed forms and loop oracles",
            budget: None,
            run: regularizers,
        },
        Criterion {
            id: 7,
            name: "initialization arithmetic and depth ordering",
            budget: None,
            run: init_arithmetic,
        },
        Criterion {
            id: 8,
            name: "determinism and round trips",
            budget: None,
            run: determinism,
        },
        Criterion {
            id: 9,
            name: "Comp20 user layout fixture",
            budget: None,
            run: layout_fixture,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = c.budget.map_or(String::new(), |b| format!(" / {:.0?} budget", b));
        println!(
            "criterion {} {}: {} ({}; {:.2?}{})",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            outcome.detail,
            elapsed,
            budget
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared generators and oracles

fn unit_ball_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if p.norm() <= 1.0 {
            pts.push(p);
        }
    }
    pts
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return UnitQuaternion::new_normalize(q);
        }
    }
}

fn random_scene(rng: &mut impl Rng, max_points: usize) -> Scene {
    let n = rng.gen_range(2..=4);
    let instances = (0..n)
        .map(|i| {
            let k = rng.gen_range(20..=max_points);
            let cloud = GaussianCloud::from_points(unit_ball_points(rng, k), 0.01).unwrap();
            let t = InstanceTransform::new(
                rng.gen_range(0.5..1.5),
                random_rotation(rng),
                Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
            )
            .unwrap();
            Instance::new(i.to_string(), "blob", cloud).with_transform(t)
        })
        .collect();
    Scene::new(instances).unwrap()
}

/// `s * q p q^-1 + t` via the vector form of quaternion rotation.
fn oracle_transform(p: &Vec3, t: &InstanceTransform) -> Vec3 {
    let [w, x, y, z] = t.quaternion_wxyz();
    let u = Vec3::new(x, y, z);
    let rotated = p + 2.0 * w * u.cross(p) + 2.0 * u.cross(&u.cross(p));
    t.scale * rotated + t.translation
}

fn oracle_world(scene: &Scene) -> Vec<Vec<Vec3>> {
    scene
        .instances()
        .iter()
        .map(|inst| inst.cloud.points().iter().map(|p| oracle_transform(p, &inst.transform)).collect())
        .collect()
}

/// Mean of the points, then mean distance to it.
fn oracle_center_radius(points: &[Vec3]) -> (Vec3, f64) {
    let mut c = Vec3::zeros();
    for p in points {
        c += p;
    }
    c /= points.len() as f64;
    let mut r = 0.0;
    for p in points {
        r += (p - c).norm();
    }
    (c, r / points.len() as f64)
}

/// Naive double loop over ordered instance pairs: returns the total and every gap.
fn oracle_collision(world: &[Vec<Vec3>], lambda: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut gaps = Vec::new();
    for j in 0..world.len() {
        let (c, r) = oracle_center_radius(&world[j]);
        for (i, pts) in world.iter().enumerate() {
            if i == j {
                continue;
            }
            for p in pts {
                let gap = r - (p - c).norm();
                gaps.push(gap);
                if gap > 0.0 {
                    total += lambda * gap;
                }
            }
        }
    }
    (total, gaps)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// 1

fn collision_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = CollisionOptions::default();
    let mut worst: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..200 {
        let scene = random_scene(&mut rng, 200);
        let got = collision_loss_scene(&scene, &opts).unwrap().total;
        let (want, _) = oracle_collision(&oracle_world(&scene), opts.lambda);
        if want > 0.0 {
            overlapping += 1;
        }
        let err = if want == 0.0 { got.abs() } else { rel_err(got, want, 0.0) };
        worst = worst.max(err);
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("200 scenes, {overlapping} overlapping, worst relative error {worst:.2e} (limit 1e-12)"),
    }
}

// ---------------------------------------------------------------------------
// 2

const GRAD_H: f64 = 1e-5;

fn perturbed(scene: &Scene, inst: usize, comp: usize, delta: f64) -> Scene {
    let mut xfs = scene.transforms();
    let t = &mut xfs[inst];
    match comp {
        0..=2 => {
            let mut w = Vec3::zeros();
            w[comp] = delta;
            t.rotation = UnitQuaternion::from_scaled_axis(w) * t.rotation;
        }
        3..=5 => t.translation[comp - 3] += delta,
        _ => t.scale += delta,
    }
    scene.with_transforms(&xfs).unwrap()
}

fn component(g: &TransformGrad, comp: usize) -> f64 {
    match comp {
        0..=2 => g.rotation[comp],
        3..=5 => g.translation[comp - 3],
        _ => g.scale,
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = CollisionOptions::default();
    let (mut checked, mut excluded, mut failures) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scene = random_scene(&mut rng, 200);
        let grads = collision_grad(&scene, &opts).unwrap();
        for inst in 0..scene.len() {
            for comp in 0..7 {
                let (lp, gaps_p) = oracle_collision(&oracle_world(&perturbed(&scene, inst, comp, GRAD_H)), opts.lambda);
                let (lm, gaps_m) =
                    oracle_collision(&oracle_world(&perturbed(&scene, inst, comp, -GRAD_H)), opts.lambda);
                let (_, gaps_0) = oracle_collision(&oracle_world(&scene), opts.lambda);
                // a relu boundary inside the stencil makes the difference quotient meaningless
                let crosses = gaps_0
                    .iter()
                    .zip(&gaps_p)
                    .zip(&gaps_m)
                    .any(|((a, b), c)| (*a > 0.0) != (*b > 0.0) || (*a > 0.0) != (*c > 0.0) || a.abs() < 1e-6);
                if crosses {
                    excluded += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * GRAD_H);
                let an = component(&grads[inst], comp);
                let err = rel_err(an, fd, 1e-6);
                worst = worst.max(err);
                checked += 1;
                if err > 1e-4 {
                    failures += 1;
                }
            }
        }
    }
    Outcome {
        pass: failures == 0 && checked > 0,
        detail: format!(
            "{checked} components checked, {excluded} excluded near a relu boundary, {failures} over 1e-4, worst {worst:.2e}"
        ),
    }
}

// ---------------------------------------------------------------------------
// 3

fn two_spheres() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ball = |rng: &mut ChaCha8Rng| GaussianCloud::from_points(unit_ball_points(rng, 400), 0.02).unwrap();
    let a = ball(&mut rng);
    let b = ball(&mut rng);
    let place = |z: f64| InstanceTransform::new(1.0, UnitQuaternion::identity(), Vec3::new(0.0, 0.0, z)).unwrap();
    let scene = Scene::new(vec![
        Instance::new("a", "sphere", a).with_transform(place(0.0)),
        Instance::new("b", "sphere", b).with_transform(place(0.5)),
    ])
    .unwrap();
    let world = oracle_world(&scene);
    let (ca, ra) = oracle_center_radius(&world[0]);
    let (cb, rb) = oracle_center_radius(&world[1]);
    let d0 = (ca - cb).norm();

    let cfg = LayoutOptConfig {
        lambda_feat: 0.0,
        ..LayoutOptConfig::default()
    };
    let inputs = RefineInputs {
        reference: None,
        extractor: &SilhouetteDepthDescriptor,
        guidance: &StubZero,
        prompt: "",
    };
    let out = refine_layout(&scene, &inputs, &cfg).unwrap();
    let mut col: Vec<f64> = out.trace.records.iter().map(|r| r.col).collect();
    col.push(collision_loss_scene(&out.scene, &cfg.collision_options()).unwrap().total);
    let steps = col.len() - 1;
    let non_increasing = col.windows(2).filter(|w| w[1] <= w[0]).count();
    let reduction = 1.0 - col[steps] / col[0];
    let world = oracle_world(&out.scene);
    let d1 = (oracle_center_radius(&world[0]).0 - oracle_center_radius(&world[1]).0).norm();
    let monotone = non_increasing as f64 / steps as f64;
    Outcome {
        pass: out.trace.len() == 400 && reduction >= 0.9 && d1 > d0 && monotone >= 0.95,
        detail: format!(
            "R = {ra:.3}/{rb:.3}, distance {d0:.3} -> {d1:.3}, L_col {:.4} -> {:.4} ({:.1}% reduction), non-increasing on {non_increasing}/{steps} steps",
            col[0],
            col[steps],
            100.0 * reduction
        ),
    }
}

// ---------------------------------------------------------------------------
// 4

/// A few random ellipsoidal blobs, normalized to unit extent.
fn asymmetric_cloud(rng: &mut impl Rng) -> GaussianCloud {
    let mut pts = Vec::new();
    for _ in 0..4 {
        let center = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
        let axes = Vec3::new(rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45));
        for p in unit_ball_points(rng, 300) {
            pts.push(center + p.component_mul(&axes));
        }
    }
    let cloud = GaussianCloud::from_points(pts, 0.02).unwrap();
    normalize_cloud(&cloud).unwrap().0
}

fn azimuth_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn pose_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = build_pose_grid(10.0, [-30.0, 60.0]).unwrap();
    let ex = SilhouetteDepthDescriptor;
    let res = POSE_SEARCH_RESOLUTION;
    let reference = |cloud: &GaussianCloud, e: f64, a: f64| {
        ex.extract(&render(cloud, &CameraModel::for_object(e, a, res).unwrap()).unwrap()).unwrap()
    };
    let (mut exact, mut off_err) = (0, 0.0);
    for _ in 0..20 {
        let cloud = asymmetric_cloud(&mut rng);
        let target = grid.poses[rng.gen_range(0..grid.poses.len())];
        let est = estimate_rotation(&cloud, &reference(&cloud, target.elevation, target.azimuth), &grid, &ex, res)
            .unwrap();
        if est.pose.elevation == target.elevation && est.pose.azimuth == target.azimuth {
            exact += 1;
        }
        let e = rng.gen_range(-29.0..59.0);
        let a = rng.gen_range(0.0..360.0);
        let est = estimate_rotation(&cloud, &reference(&cloud, e, a), &grid, &ex, res).unwrap();
        off_err += azimuth_error(est.pose.azimuth, a);
    }
    let mean = off_err / 20.0;
    Outcome {
        pass: exact == 20 && mean <= 10.0,
        detail: format!("{exact}/20 exact on grid poses, mean off-grid azimuth error {mean:.2} deg (limit 10)"),
    }
}

// ---------------------------------------------------------------------------
// 5

fn schedule_conformance() -> Outcome {
    let schedule = TimestepSchedule::two_phase(1500);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let mut notes = Vec::new();
    for (iters, lo, hi) in [(0..800usize, 0.10, 0.50), (800..1500, 0.02, 0.75)] {
        let its: Vec<usize> = iters.collect();
        let mut sum = 0.0;
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..10_000 {
            let t = sample_timestep(&schedule, its[k % its.len()], &mut rng).unwrap();
            sum += t;
            min = min.min(t);
            max = max.max(t);
        }
        let mean = sum / 10_000.0;
        let mid = (lo + hi) / 2.0;
        ok &= min >= lo && max <= hi && (mean - mid).abs() <= 0.02;
        notes.push(format!("[{lo}, {hi}]: min {min:.4} max {max:.4} mean {mean:.4} (mid {mid})"));
    }
    Outcome {
        pass: ok,
        detail: notes.join("; "),
    }
}

// ---------------------------------------------------------------------------
// 6

/// All 4-neighbour pairs, enumerated from the lower-indexed pixel of each pair.
fn pair_oracle<T>(field: &[T], mask: &[bool], w: usize, h: usize, term: impl Fn(&T, &T) -> f64) -> f64 {
    let mut terms = Vec::new();
    for a in 0..w * h {
        for b in a + 1..w * h {
            let (ax, ay, bx, by) = (a % w, a / w, b % w, b / w);
            if ax.abs_diff(bx) + ay.abs_diff(by) == 1 && mask[a] && mask[b] {
                terms.push(term(&field[a], &field[b]));
            }
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

fn regularizers() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let constant = vec![0.37; 36];
    let full = vec![true; 36];
    let c_tv = tv_loss(&constant, &full, 6, 6, TvKind::Squared).unwrap();
    let checker = vec![0.0, 1.0, 1.0, 0.0];
    let board = tv_loss(&checker, &[true; 4], 2, 2, TvKind::Squared).unwrap();
    let uniform = vec![Vec3::new(0.0, 0.6, 0.8); 36];
    let smooth_uniform = normal_smooth_loss(&uniform, &full, 6, 6).unwrap();
    ok &= c_tv == 0.0 && board == 1.0 && smooth_uniform == 0.0;
    notes.push(format!("constant TV {c_tv}, checkerboard TV {board}, uniform smooth {smooth_uniform}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let n = w * h;
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let scalar: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let normals: Vec<Vec3> = (0..n)
            .map(|_| {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0));
                v.normalize()
            })
            .collect();
        let pairs = [
            (
                tv_loss(&scalar, &mask, w, h, TvKind::Squared).unwrap(),
                pair_oracle(&scalar, &mask, w, h, |a, b| (a - b) * (a - b)),
            ),
            (
                tv_loss(&normals, &mask, w, h, TvKind::Squared).unwrap(),
                pair_oracle(&normals, &mask, w, h, |a, b| {
                    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
                }),
            ),
            (
                normal_smooth_loss(&normals, &mask, w, h).unwrap(),
                pair_oracle(&normals, &mask, w, h, |a, b| 1.0 - (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])),
            ),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    ok &= worst <= 1e-12;
    notes.push(format!("100 random buffers, worst deviation {worst:.2e} (limit 1e-12)"));
    Outcome {
        pass: ok,
        detail: notes.join("; "),
    }
}

// ---------------------------------------------------------------------------
// 7

fn init_arithmetic() -> Outcome {
    let canvas = Canvas::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got.to_bits() != want.to_bits() {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    let b1 = BBox2D::new(24.0, 136.0, 168.0, 424.0);
    check("scale prompt 1", init_scale(&b1, 460.0).unwrap(), 144.0 / 460.0);
    check("scale equal widths", init_scale(&b1, 144.0).unwrap(), 1.0);
    let zero_width_rejected = init_scale(&b1, 0.0).is_err();
    let (x, y) = init_translation_xy(&BBox2D::new(0.0, 0.0, 512.0, 512.0), canvas).unwrap();
    check("full canvas x", x, 0.0);
    check("full canvas y", y, 0.0);
    let (x, y) = init_translation_xy(&b1, canvas).unwrap();
    check("prompt 1 x", x, -0.625);
    check("prompt 1 y", y, -0.09375);
    let (x, y) = init_translation_xy(&BBox2D::new(512.0, 512.0, 512.0, 512.0), canvas).unwrap();
    check("corner x", x, 1.0);
    check("corner y", y, -1.0);

    let single = DepthInput::new(4, 4, vec![0.7; 16], vec![vec![true; 16]]).unwrap();
    check("single instance z", init_depth_z(&single, 0).unwrap(), 0.0);
    let mut depth = vec![0.2; 8];
    depth[4..].fill(0.8);
    let left: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let right: Vec<bool> = (0..8).map(|i| i >= 4).collect();
    let two = DepthInput::new(8, 1, depth, vec![left, right]).unwrap();
    check("near z", init_depth_z(&two, 0).unwrap(), 1.0);
    check("far z", init_depth_z(&two, 1).unwrap(), -1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut order_violations = 0;
    for _ in 0..100 {
        let (w, h) = (16, 12);
        let depth: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..10.0)).collect();
        let k = rng.gen_range(2..=4);
        let masks: Vec<Vec<bool>> = (0..k)
            .map(|_| {
                let mut m: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.2)).collect();
                m[rng.gen_range(0..w * h)] = true;
                m
            })
            .collect();
        let input = DepthInput::new(w, h, depth.clone(), masks.clone()).unwrap();
        let z = init_depths(&input).unwrap();
        let means: Vec<f64> = masks
            .iter()
            .map(|m| {
                let sel: Vec<f64> = m.iter().zip(&depth).filter(|(on, _)| **on).map(|(_, d)| *d).collect();
                sel.iter().sum::<f64>() / sel.len() as f64
            })
            .collect();
        for a in 0..k {
            for b in 0..k {
                if means[a] < means[b] && !(z[a] > z[b]) {
                    order_violations += 1;
                }
            }
        }
    }
    let pass = failures.is_empty() && zero_width_rejected && order_violations == 0;
    Outcome {
        pass,
        detail: if failures.is_empty() {
            format!(
                "all 11 hand-computed values exact, zero width rejected: {zero_width_rejected}, {order_violations} depth ordering violations in 100 random cases"
            )
        } else {
            failures.join("; ")
        },
    }
}

// ---------------------------------------------------------------------------
// 8

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scene = random_scene(&mut rng, 200);
    let cfg = LayoutOptConfig {
        iterations: 30,
        lambda_feat: 0.0,
        collision_max_points: Some(50),
        seed: 42,
        ..LayoutOptConfig::default()
    };
    let inputs = RefineInputs {
        reference: None,
        extractor: &SilhouetteDepthDescriptor,
        guidance: &StubZero,
        prompt: "",
    };
    let run = || {
        let t = refine_layout(&scene, &inputs, &cfg).unwrap().trace;
        (t.to_csv(), t.to_json())
    };
    let (csv_a, json_a) = run();
    let (csv_b, json_b) = run();
    let traces_equal = csv_a.as_bytes() == csv_b.as_bytes() && json_a.as_bytes() == json_b.as_bytes();
    ok &= traces_equal;
    notes.push(format!("seeded traces byte-identical: {traces_equal}"));

    let cloud = GaussianCloud::from_points(
        (0..1000)
            .map(|_| Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect(),
        0.01,
    )
    .unwrap();
    let back = read_ply(&write_ply(&cloud, PlyFormat::BinaryLittleEndian)).unwrap();
    let bit_exact = back.len() == cloud.len()
        && back
            .points()
            .iter()
            .zip(cloud.points())
            .all(|(a, b)| (0..3).all(|k| a[k].to_bits() == b[k].to_bits()));
    ok &= bit_exact;
    notes.push(format!("binary PLY round trip bit-exact: {bit_exact}"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.ply"), write_ply(&cloud, PlyFormat::Ascii)).unwrap();
    let mut file = SceneFile::parse(r#"{"entries": []}"#, dir.path()).unwrap();
    for (i, xf) in scene.transforms().iter().enumerate() {
        file.entries.push(SceneEntry {
            bbox: [10.0 * i as f64, 0.0, 10.0 * i as f64 + 7.5, 33.25],
            label: format!("thing {i}"),
            cloud: "c.ply".into(),
            transform: Some(*xf),
            mask: None,
            reference: None,
        });
    }
    let path = dir.path().join("scene.json");
    save_scene_file(&file, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    save_scene_file(&load_scene_file(&path).unwrap(), &path).unwrap();
    let idempotent = std::fs::read(&path).unwrap() == first;
    ok &= idempotent;
    notes.push(format!("scene save/load/save idempotent: {idempotent}"));
    Outcome {
        pass: ok,
        detail: notes.join("; "),
    }
}

// ---------------------------------------------------------------------------
// 9

fn layout_fixture() -> Outcome {
    let fixture: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/comp20_user_layouts.json")).unwrap();
    let canvas = Canvas::default();
    let mut flagged = Vec::new();
    let mut problems = Vec::new();
    let prompts = fixture["prompts"].as_array().unwrap();
    for p in prompts {
        let index = p["index"].as_u64().unwrap();
        let rows: Vec<[f64; 4]> = serde_json::from_value(p["user"].clone()).unwrap();
        let labels: Vec<String> = serde_json::from_value(p["labels"].clone()).unwrap();
        let entries: Vec<serde_json::Value> = rows
            .iter()
            .zip(&labels)
            .map(|(r, l)| serde_json::json!({"bbox": r, "label": l}))
            .collect();
        let text = serde_json::json!({"prompt": p["prompt"], "entries": entries}).to_string();

        let mut first_bad = None;
        for (e, r) in rows.iter().enumerate() {
            if interpret_row(*r, canvas, LoadMode::Strict).is_err() {
                first_bad.get_or_insert(e);
            }
        }
        match (parse_layout_spec(&text, LoadMode::Strict), first_bad) {
            (Ok(l), None) if l.spec.entries.len() == rows.len() => {}
            (Err(compolayout::Error::Validation { entry, .. }), Some(bad)) if entry == bad => {}
            (other, _) => problems.push(format!("prompt {index}: strict load gave {:?}", other.map(|l| l.interpretations))),
        }
        match parse_layout_spec(&text, LoadMode::Lenient) {
            Ok(l) => {
                for (e, how) in l.interpretations.iter().enumerate() {
                    if *how != RowInterpretation::Corners {
                        flagged.push((index, e as u64, serde_json::to_value(how).unwrap()));
                    }
                }
            }
            Err(e) => problems.push(format!("prompt {index}: lenient load failed: {e}")),
        }
    }
    let pinned: Vec<(u64, u64, serde_json::Value)> = fixture["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| (v["prompt"].as_u64().unwrap(), v["entry"].as_u64().unwrap(), v["read_as"].clone()))
        .collect();
    let matches = flagged == pinned;
    if !matches {
        problems.push(format!("flagged {flagged:?} but pinned {pinned:?}"));
    }
    Outcome {
        pass: prompts.len() == 20 && problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "{} prompts parsed, {} rows violate [x1, y1, x2, y2] exactly as pinned, all recovered leniently",
                prompts.len(),
                flagged.len()
            )
        } else {
            problems.join("; ")
        },
    }
}
