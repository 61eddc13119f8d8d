use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::Serialize;

use splat4d::alignment::align_target_poses;
use splat4d::io::{self, PoseEntry, SceneDir};
use splat4d::optimize::{refine, trace_csv, RefineConfig, View};
use splat4d::pipeline::PipelineConfig;
use splat4d::protocol::{evaluate, flow_check, flow_check_csv, GaussianSource};
use splat4d::rasterizer::Rasterizer;
use splat4d::synth::{generate, orbit_cameras, MotionModel, SynthSpec};
use splat4d::{Camera, Scene};

#[derive(Parser)]
#[command(name = "splat4d", version, about = "4D Gaussian scenes: synthesis, rendering, refinement and evaluation")]
struct Cli {
    /// Worker threads for rendering (0 = all cores). Output does not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for anything random.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with exact depth, flow and motion.
    Synth(SynthArgs),
    /// Render the scene Gaussians from a scene camera or an orbit path to PNG.
    Render(RenderArgs),
    /// Prune and refine Gaussians against the scene images.
    Refine(RefineArgs),
    /// Align second-pass target poses into the first pass's frame.
    Align(AlignArgs),
    /// Chunked held-out-frame evaluation; writes a metrics CSV.
    Evaluate(EvaluateArgs),
    /// Motion-loss and velocity round-trip residuals per camera and frame.
    Flowcheck(FlowcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Static,
    ConstantVelocity,
    Orbit,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    gaussians: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, value_enum, default_value_t = MotionArg::ConstantVelocity)]
    motion: MotionArg,
    /// Per-axis speed bound in m/s, or the orbit rate in rad/s.
    #[arg(long, default_value_t = 0.5)]
    velocity_range: f64,
    #[arg(long, default_value_t = 0.1)]
    frame_interval: f64,
    #[arg(long, default_value_t = 50.0)]
    fov_deg: f64,
    #[arg(long, default_value_t = 2.5)]
    ring_radius: f64,
    #[arg(long, default_value_t = 0.8)]
    ring_height: f64,
    #[arg(long, default_value_t = 0)]
    sh_order: u32,
}

#[derive(Args)]
struct RenderArgs {
    scene: PathBuf,
    /// G4DS file to render instead of the manifest's Gaussians.
    #[arg(long)]
    gaussians: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Query time in seconds; defaults to the first timestamp.
    #[arg(long)]
    time: Option<f64>,
    /// Render this many views on a ring around the scene instead; `--output`
    /// is then a directory.
    #[arg(long)]
    orbit: Option<usize>,
}

#[derive(Args)]
struct RefineArgs {
    scene: PathBuf,
    #[arg(long)]
    gaussians: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    prune_threshold: f64,
    /// Loss trace CSV; defaults to the output path with a .csv extension.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    no_ssim: bool,
    #[arg(long)]
    optimize_dynamics: bool,
}

#[derive(Args)]
struct AlignArgs {
    /// Context poses from the first pass.
    pass1: PathBuf,
    /// Second-pass poses: the same contexts in order, followed by the targets.
    pass2: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    scene: PathBuf,
    /// Evaluate this G4DS file for every chunk.
    #[arg(long, conflicts_with = "pipeline")]
    gaussians: Option<PathBuf>,
    /// Build Gaussians per chunk from the context frames' depth and motion.
    #[arg(long)]
    pipeline: bool,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 100)]
    cap: usize,
}

#[derive(Args)]
struct FlowcheckArgs {
    scene: PathBuf,
}

fn invalid(msg: &str) -> splat4d::Error {
    splat4d::Error::Validation(vec![msg.to_string()])
}

fn rasterizer(threads: usize) -> Rasterizer {
    let n = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    };
    Rasterizer::new(n)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => io::write_text(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_scene(dir: &SceneDir, gaussians: Option<&Path>) -> Result<Scene> {
    let mut scene = dir.scene()?;
    if let Some(p) = gaussians {
        let set = io::read_gaussians(p, Some(dir.manifest.sh_order))?;
        scene.gaussians = set.gaussians;
    } else if dir.manifest.gaussians.is_none() {
        bail!(invalid("no Gaussians: pass --gaussians or reference them in the manifest"));
    }
    Ok(scene)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = cli.output.as_deref().ok_or_else(|| invalid("synth needs --output <dir>"))?;
    let spec = SynthSpec {
        n_gaussians: a.gaussians,
        n_cameras: a.cameras,
        n_frames: a.frames,
        ring_radius: a.ring_radius,
        ring_height: a.ring_height,
        frame_interval: a.frame_interval,
        motion: match a.motion {
            MotionArg::Static => MotionModel::Static,
            MotionArg::ConstantVelocity => MotionModel::ConstantVelocity,
            MotionArg::Orbit => MotionModel::Orbit,
        },
        velocity_range: a.velocity_range,
        seed: cli.seed,
        width: a.width,
        height: a.height,
        fov_deg: a.fov_deg,
        sh_order: a.sh_order,
    };
    let scene = generate(&spec, &rasterizer(cli.threads))?;
    scene.write(out)?;
    eprintln!(
        "wrote {} cameras x {} frames, {} gaussians to {}",
        spec.n_cameras,
        spec.n_frames,
        scene.scene.gaussians.len(),
        out.display()
    );
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let dir = SceneDir::open(&a.scene)?;
    let scene = load_scene(&dir, a.gaussians.as_deref())?;
    let t = a.time.or(scene.timestamps.first().copied()).unwrap_or(0.0);
    let rast = rasterizer(cli.threads);
    let Some(n) = a.orbit else {
        let cam = scene
            .cameras
            .get(a.camera)
            .ok_or_else(|| invalid(&format!("camera {} out of range ({} cameras)", a.camera, scene.cameras.len())))?;
        let out = cli.output.clone().unwrap_or_else(|| PathBuf::from("render.png"));
        io::write_png(&out, &rast.render(&scene, cam, t).color)?;
        return Ok(());
    };
    let first = scene
        .cameras
        .first()
        .ok_or_else(|| invalid("scene has no cameras"))?;
    let centroid = if scene.gaussians.is_empty() {
        Vector3::zeros()
    } else {
        scene.gaussians.iter().fold(Vector3::zeros(), |acc, g| acc + g.mu) / scene.gaussians.len() as f64
    };
    let offset = first.center() - centroid;
    let radius = Vector3::new(offset.x, 0.0, offset.z).norm().max(1e-3);
    let fov_deg = (2.0 * (first.width as f64 / (2.0 * first.fx)).atan()).to_degrees();
    let path: Vec<Camera> = orbit_cameras(centroid, radius, offset.y, n, 0.0, fov_deg, first.width, first.height)?;
    let out = cli.output.clone().unwrap_or_else(|| PathBuf::from("orbit"));
    for (k, cam) in path.iter().enumerate() {
        io::write_png(&out.join(format!("view_{k:04}.png")), &rast.render(&scene, cam, t).color)?;
    }
    Ok(())
}

fn refine_cmd(cli: &Cli, a: &RefineArgs) -> Result<()> {
    let dir = SceneDir::open_checked(&a.scene)?;
    let scene = load_scene(&dir, a.gaussians.as_deref())?;
    let mut views = Vec::new();
    for c in 0..dir.manifest.camera_count {
        for (k, &time) in dir.manifest.timestamps.iter().enumerate() {
            views.push(View {
                image: dir.image(c, k)?,
                camera: c,
                time,
            });
        }
    }
    let cfg = RefineConfig {
        steps: a.steps,
        prune_threshold: a.prune_threshold,
        use_ssim: !a.no_ssim,
        optimize_dynamics: a.optimize_dynamics,
        ..RefineConfig::default()
    };
    let out = refine(&rasterizer(cli.threads), &scene, &views, &cfg)?;
    let path = cli.output.clone().unwrap_or_else(|| PathBuf::from("refined.g4ds"));
    io::write_gaussians(&path, &out.scene)?;
    let trace = a.trace.clone().unwrap_or_else(|| path.with_extension("csv"));
    io::write_text(&trace, &trace_csv(&out.trace))?;
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        eprintln!(
            "kept {} of {} gaussians; loss {:.6e} -> {:.6e} over {} steps",
            out.scene.gaussians.len(),
            out.before_prune,
            first.total,
            last.total,
            a.steps
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignOutput {
    scale: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    residual: f64,
    rigid_fallback: bool,
    poses: Vec<PoseEntry>,
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let pass1 = io::read_poses(&a.pass1)?;
    let pass2 = io::read_poses(&a.pass2)?;
    if pass2.len() < pass1.len() {
        bail!(invalid(&format!(
            "second pass has {} poses, fewer than the {} contexts of the first",
            pass2.len(),
            pass1.len()
        )));
    }
    let (ctx2, targets) = pass2.split_at(pass1.len());
    let aligned = align_target_poses(&pass1, ctx2, targets)?;
    let t = aligned.transform;
    let report = AlignOutput {
        scale: t.scale,
        rotation: std::array::from_fn(|r| std::array::from_fn(|c| t.rotation[(r, c)])),
        translation: [t.translation.x, t.translation.y, t.translation.z],
        residual: aligned.fit.residual,
        rigid_fallback: aligned.rigid_fallback,
        poses: aligned.poses.iter().map(PoseEntry::from).collect(),
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(cli.output.as_deref(), &text)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<bool> {
    let dir = SceneDir::open(&a.scene)?;
    let source = if a.pipeline {
        GaussianSource::Pipeline(PipelineConfig {
            stride: a.stride,
            sh_order: dir.manifest.sh_order,
            ..PipelineConfig::default()
        })
    } else if let Some(p) = &a.gaussians {
        let mut scene = dir.scene()?;
        scene.gaussians = io::read_gaussians(p, Some(dir.manifest.sh_order))?.gaussians;
        GaussianSource::Fixed(scene)
    } else {
        GaussianSource::Manifest
    };
    let report = evaluate(&dir, &source, a.cap, &rasterizer(cli.threads))?;
    emit(cli.output.as_deref(), &report.to_csv())?;
    eprint!("{}", report.table());
    Ok(report.failures() == 0)
}

fn flowcheck(cli: &Cli, a: &FlowcheckArgs) -> Result<()> {
    let dir = SceneDir::open_checked(&a.scene)?;
    emit(cli.output.as_deref(), &flow_check_csv(&flow_check(&dir)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|e| e.downcast_ref::<splat4d::Error>().is_some_and(|e| e.is_validation()));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(&cli, a).map(|_| true),
        Command::Render(a) => render(&cli, a).map(|_| true),
        Command::Refine(a) => refine_cmd(&cli, a).map(|_| true),
        Command::Align(a) => align(&cli, a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(&cli, a),
        Command::Flowcheck(a) => flowcheck(&cli, a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some chunks could not be evaluated");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
