//! `compolayout`: lift 2D layouts to 3D scenes and refine them.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numeric failure. Errors go to
//! standard error as one JSON object `{"error": <code>, "message": <text>}`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use compolayout::collision::collision_loss_scene;
use compolayout::guidance::sample_timestep;
use compolayout::io::{
    load_scene_file, save_scene_file, write_atomic, write_buffers, LoadMode, PipelineConfig, SceneFile,
};
use compolayout::optimizer::{refinement_plan, InstanceRefineConfig, RefineError, RefineProfile};
use compolayout::raster::{scene_camera_radius, DEFAULT_FOV_DEG, LOSS_RESOLUTION};
use compolayout::{
    compose_scene, initialize_layout, normalize_cloud, refine_layout, render, CameraModel, Error,
    InstanceTransform, OptTrace, Pose, RefineInputs, SilhouetteDepthDescriptor, StubZero,
};

#[derive(Parser)]
#[command(name = "compolayout", version, about = "Compositional 3D layout from 2D boxes")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "COMPOLAYOUT_SEED")]
    seed: Option<u64>,

    /// TOML or JSON file merged over the scene's `config` section.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute initial transforms from the layout and write them into the scene.
    Init {
        scene: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Reinterpret boxes that are not valid `[x1, y1, x2, y2]` rows.
        #[arg(long)]
        lenient: bool,
    },
    /// Refine transforms against the collision and reference losses.
    Optimize {
        scene: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Per-iteration loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Full trace including transforms as JSON.
        #[arg(long)]
        trace_json: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render the composed scene and dump silhouette, depth and normal buffers.
    Render {
        scene: PathBuf,
        /// `elevation,azimuth[,radius]` in degrees; radius defaults to the reference camera distance.
        #[arg(long, default_value = "0,0")]
        pose: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = LOSS_RESOLUTION)]
        resolution: usize,
    },
    /// Print the collision report of the scene as JSON.
    Collide { scene: PathBuf },
    /// Dump the per-iteration instance refinement plan.
    Plan {
        #[arg(long, value_enum, default_value_t = ProfileArg::Short)]
        profile: ProfileArg,
        #[arg(long, value_enum, default_value_t = PlanFormat::Csv)]
        format: PlanFormat,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Short,
    Extended,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanFormat {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, exit) = classify(&err);
            let line = json!({ "error": code, "message": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::from(exit)
        }
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    let lib = err
        .downcast_ref::<Error>()
        .or_else(|| err.downcast_ref::<RefineError>().map(|e| &e.source));
    match lib {
        Some(e) => (e.code(), if e.is_numeric() { 2 } else { 1 }),
        None => ("config", 1),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Init { scene, output, lenient } => cmd_init(cli, scene, output, *lenient),
        Command::Optimize {
            scene,
            output,
            trace,
            trace_json,
            iterations,
        } => cmd_optimize(cli, scene, output, trace.as_deref(), trace_json.as_deref(), *iterations),
        Command::Render {
            scene,
            pose,
            output,
            resolution,
        } => cmd_render(cli, scene, pose, output, *resolution),
        Command::Collide { scene } => cmd_collide(cli, scene),
        Command::Plan { profile, format, output } => cmd_plan(cli, *profile, *format, output.as_deref()),
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_overlay(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Scene file with the `--config` overlay and `--seed` applied.
fn load_scene(cli: &Cli, path: &Path) -> anyhow::Result<SceneFile> {
    let mut scene = load_scene_file(path)?;
    if let Some(cfg) = &cli.config {
        let mut value = serde_json::to_value(&scene.config)?;
        merge(&mut value, read_overlay(cfg)?);
        scene.config = serde_json::from_value::<PipelineConfig>(value)
            .with_context(|| format!("applying {}", cfg.display()))?;
    }
    if let Some(seed) = cli.seed {
        scene.config.optimize.seed = seed;
    }
    Ok(scene)
}

fn print_json(value: &Value) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_init(cli: &Cli, path: &Path, output: &Path, lenient: bool) -> anyhow::Result<()> {
    let mut scene = load_scene(cli, path)?;
    if lenient {
        scene.config.load_mode = LoadMode::Lenient;
    }
    let layout = scene.layout()?;
    let boxes: Vec<_> = layout.spec.entries.iter().map(|e| e.bbox).collect();
    let extractor = SilhouetteDepthDescriptor;

    let mut canonical = Vec::new();
    let mut normalizers = Vec::new();
    for (i, cloud) in scene.load_clouds()?.iter().enumerate() {
        let (c, center, extent) =
            normalize_cloud(cloud).with_context(|| format!("normalizing the cloud of entry {i}"))?;
        let unit = InstanceTransform::identity().rotation;
        normalizers.push(InstanceTransform::new(1.0 / extent, unit, -center / extent)?);
        canonical.push(c);
    }
    let depth = scene.depth_input(&boxes)?;
    let references = scene.instance_references(&extractor)?;
    let inits = initialize_layout(
        &layout.spec,
        &canonical,
        depth.as_ref(),
        &references,
        &extractor,
        &scene.config.init,
    )?;

    let transforms: Vec<InstanceTransform> = inits
        .iter()
        .zip(&normalizers)
        .map(|(init, n)| init.transform.compose(n))
        .collect();
    scene.set_transforms(&transforms)?;
    save_scene_file(&scene, output)?;

    let entries: Vec<Value> = inits
        .iter()
        .zip(&layout.interpretations)
        .zip(&scene.entries)
        .map(|((init, how), e)| {
            json!({
                "label": e.label,
                "bbox": e.bbox,
                "read_as": how,
                "scale": init.transform.scale,
                "translation": [init.transform.translation.x, init.transform.translation.y, init.transform.translation.z],
                "pose": init.rotation.as_ref().map(|r| json!({
                    "elevation": r.pose.elevation,
                    "azimuth": r.pose.azimuth,
                    "similarity": r.similarity,
                })),
            })
        })
        .collect();
    print_json(&json!({ "output": output, "entries": entries }))
}

fn write_trace(trace: &OptTrace, csv: Option<&Path>, json: Option<&Path>) -> anyhow::Result<()> {
    if let Some(p) = csv {
        write_atomic(p, trace.to_csv().as_bytes())?;
    }
    if let Some(p) = json {
        let mut s = trace.to_json();
        s.push('\n');
        write_atomic(p, s.as_bytes())?;
    }
    Ok(())
}

fn cmd_optimize(
    cli: &Cli,
    path: &Path,
    output: &Path,
    trace_csv: Option<&Path>,
    trace_json: Option<&Path>,
    iterations: Option<usize>,
) -> anyhow::Result<()> {
    let mut scene = load_scene(cli, path)?;
    if let Some(n) = iterations {
        scene.config.optimize.iterations = n;
    }
    let extractor = SilhouetteDepthDescriptor;
    let reference = scene.scene_reference(&extractor)?;
    let mut cfg = scene.config.optimize.clone();
    if reference.is_none() && cfg.lambda_feat > 0.0 {
        eprintln!(
            "{}",
            json!({ "warning": "no_reference", "message": "scene has no reference view; feature loss disabled" })
        );
        cfg.lambda_feat = 0.0;
    }
    let initial = scene.build_scene()?;
    let inputs = RefineInputs {
        reference: reference.as_ref(),
        extractor: &extractor,
        guidance: &StubZero,
        prompt: &scene.prompt,
    };
    let outcome = match refine_layout(&initial, &inputs, &cfg) {
        Ok(o) => o,
        Err(e) => {
            write_trace(&e.trace, trace_csv, trace_json)?;
            return Err(anyhow!(e));
        }
    };
    write_trace(&outcome.trace, trace_csv, trace_json)?;
    scene.set_transforms(&outcome.trace.final_transforms)?;
    save_scene_file(&scene, output)?;

    let first = outcome.trace.records.first();
    let last = outcome.trace.records.last();
    print_json(&json!({
        "output": output,
        "iterations": outcome.trace.len(),
        "initial": first.map(|r| json!({"total": r.total, "feat": r.feat, "col": r.col})),
        "final": last.map(|r| json!({"total": r.total, "feat": r.feat, "col": r.col})),
    }))
}

fn parse_pose(text: &str) -> anyhow::Result<Pose> {
    let parts = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidInput(format!("pose {text:?}: {e}")))?;
    let (e, a, r) = match parts.as_slice() {
        [e, a] => (*e, *a, scene_camera_radius(DEFAULT_FOV_DEG)),
        [e, a, r] => (*e, *a, *r),
        _ => return Err(Error::InvalidInput(format!("pose {text:?} must be elevation,azimuth[,radius]")).into()),
    };
    Ok(Pose::new(e, a, r)?)
}

fn cmd_render(cli: &Cli, path: &Path, pose: &str, output: &Path, resolution: usize) -> anyhow::Result<()> {
    let scene = load_scene(cli, path)?;
    let camera = CameraModel::new(parse_pose(pose)?, DEFAULT_FOV_DEG, resolution, resolution)?;
    let buffers = render(&compose_scene(&scene.build_scene()?)?, &camera)?;
    let paths = write_buffers(&buffers, output)?;
    print_json(&json!({
        "foreground_pixels": buffers.foreground_count(),
        "files": paths,
    }))
}

fn cmd_collide(cli: &Cli, path: &Path) -> anyhow::Result<()> {
    let scene = load_scene(cli, path)?;
    let report = collision_loss_scene(&scene.build_scene()?, &scene.config.optimize.collision_options())?;
    print_json(&serde_json::to_value(&report)?)
}

fn cmd_plan(cli: &Cli, profile: ProfileArg, format: PlanFormat, output: Option<&Path>) -> anyhow::Result<()> {
    let profile = match profile {
        ProfileArg::Short => RefineProfile::Short,
        ProfileArg::Extended => RefineProfile::Extended,
    };
    let mut cfg = InstanceRefineConfig::for_profile(profile);
    if let Some(path) = &cli.config {
        let mut value = serde_json::to_value(&cfg)?;
        let overlay = read_overlay(path)?;
        if let Some(section) = overlay.get("instance") {
            merge(&mut value, section.clone());
            cfg = serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))?;
        }
    }
    let plan = refinement_plan(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let samples = plan
        .iter()
        .map(|e| sample_timestep(&cfg.schedule, e.iteration, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;

    let text = match format {
        PlanFormat::Csv => {
            let mut s = String::from("iteration,t_min,t_max,t_sample,densify_prune,resolution,position_lr\n");
            for (e, t) in plan.iter().zip(&samples) {
                s.push_str(&format!(
                    "{},{:?},{:?},{:?},{},{},{:?}\n",
                    e.iteration, e.t_range[0], e.t_range[1], t, e.densify_prune, e.resolution, e.position_lr
                ));
            }
            s
        }
        PlanFormat::Json => {
            let rows: Vec<Value> = plan
                .iter()
                .zip(&samples)
                .map(|(e, t)| {
                    let mut v = serde_json::to_value(e).expect("plan entry serializes");
                    v["t_sample"] = json!(t);
                    v
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows)?;
            s.push('\n');
            s
        }
    };
    match output {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
