//! Command-line front end.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::camera::{orbit_cameras, Intrinsics};
use crate::gradcheck::{run_suite, GradcheckConfig};
use crate::grid::SparseVoxelGrid;
use crate::io;
use crate::losses::RegConfig;
use crate::optimize::{fit, resize_background, BackgroundModel, Dataset, FitConfig, FitEvent, GrowthSchedule, Stage, Trainer};
use crate::raster::ColorImage;
use crate::render::{fuse_visibility, render_image, Attribution, Background, PruneThresholds, RenderSettings};
use crate::synth::{generate_dataset, AnalyticScene, DatasetConfig, SceneKind};

#[derive(Debug, Parser)]
#[command(name = "voxfield", version, about = "Sparse voxel radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an analytic scene into a dataset directory.
    Synth(SynthArgs),
    /// Fit a grid to a dataset directory.
    Fit(FitArgs),
    /// Render a grid from a camera file.
    Render(RenderArgs),
    /// Keep only voxels visible from an orbit of cameras.
    Prune(PruneArgs),
    /// Print grid statistics.
    Stats(StatsArgs),
    /// Time grid loading, rendering and fit iterations.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "sphere")]
    pub scene: SceneArg,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Views halfway between the training azimuths.
    #[arg(long)]
    pub held_out: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SceneArg {
    Sphere,
    TwoSpheres,
    AxisBoxes,
    Empty,
}

impl From<SceneArg> for SceneKind {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::Sphere => SceneKind::Sphere,
            SceneArg::TwoSpheres => SceneKind::TwoSpheres,
            SceneArg::AxisBoxes => SceneKind::AxisBoxes,
            SceneArg::Empty => SceneKind::Empty,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackgroundArg {
    Image,
    Uniform,
    Fixed,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the grid, background, log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Resolution of the first stage.
    #[arg(long, default_value_t = 32)]
    pub grid_res: u32,
    /// Resolutions of the following stages, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grow: Vec<u32>,
    /// Iterations per stage, comma separated; one value applies to all stages.
    #[arg(long, value_delimiter = ',', default_value = "2000")]
    pub iters: Vec<u32>,
    /// Training image width for every stage.
    #[arg(long, default_value_t = 64)]
    pub image_res: u32,
    #[arg(long, default_value_t = 0.1)]
    pub lr_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_sh: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_background: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_dv: f64,
    /// Depth-variance threshold in world units²; defaults to (1.5 voxels)².
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    pub lambda_tv: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_cvg_fg: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_cvg_bg: f64,
    #[arg(long, default_value_t = RegConfig::ETA_FG_SPARSE)]
    pub eta_fg: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eta_bg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, value_enum, default_value = "image")]
    pub background: BackgroundArg,
    /// Color for `--background fixed`, as r,g,b in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub background_color: Option<Vec<f64>>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Record per-iteration wall time in the log.
    #[arg(long)]
    pub wall_time: bool,
    /// Print progress every this many iterations.
    #[arg(long, default_value_t = 0)]
    pub progress: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Depth map; `.raw` writes little-endian f32, anything else a normalized PNG.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<PathBuf>,
    #[arg(long)]
    pub no_early_stop: bool,
    /// Constant background r,g,b.
    #[arg(long, value_delimiter = ',', conflicts_with = "background_image")]
    pub background: Option<Vec<f64>>,
    /// Background image, e.g. the one written by `fit`.
    #[arg(long)]
    pub background_image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OrbitArgs {
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: u32,
    #[arg(long, default_value_t = 2.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.3)]
    pub elevation: f64,
    #[arg(long, default_value_t = 0.9)]
    pub fov: f64,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub tau_sigma: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tau_t: f64,
    /// Mark all trilinear neighbors of a visible sample instead of the
    /// containing voxel.
    #[arg(long)]
    pub stencil: bool,
    #[command(flatten)]
    pub orbit: OrbitArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub grid: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 256)]
    pub resolution: u32,
    /// Fit iterations to time on the loaded grid; 0 skips them.
    #[arg(long, default_value_t = 5)]
    pub fit_iters: usize,
    /// Training image width for the timed fit iterations.
    #[arg(long, default_value_t = 64)]
    pub fit_image_res: u32,
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
/// Exit status: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => with_threads(a.threads, || fit_cmd(a)),
        Command::Render(a) => render_cmd(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Bench(a) => with_threads(a.threads, || bench_cmd(a)),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> anyhow::Result<R> + Send) -> anyhow::Result<R> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;
    pool.install(f)
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn color3(v: &[f64]) -> anyhow::Result<[f64; 3]> {
    match v {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => bail!("colors are three comma-separated values in [0, 1]"),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let scene = AnalyticScene::from_kind(a.scene.into())?;
    let mut config = DatasetConfig {
        views: a.views,
        resolution: a.resolution,
        seed: a.seed,
        ..Default::default()
    };
    if a.held_out {
        config = config.held_out();
    }
    let data = generate_dataset(&scene, &config)?;
    io::write_dataset(&a.out, &io::SceneFile { scene, config }, &data)?;
    print_json(&json!({ "out": a.out, "views": data.len(), "resolution": a.resolution }))
}

fn fit_config(a: &FitArgs, scene_bg: Option<[f64; 3]>) -> anyhow::Result<FitConfig> {
    let mut res = vec![a.grid_res];
    res.extend(&a.grow);
    let iters = match a.iters.len() {
        1 => vec![a.iters[0]; res.len()],
        n if n == res.len() => a.iters.clone(),
        n => bail!("--iters has {n} values for {} stages", res.len()),
    };
    let schedule = GrowthSchedule {
        stages: res
            .iter()
            .zip(&iters)
            .map(|(&grid_res, &iterations)| Stage {
                grid_res,
                image_res: a.image_res,
                iterations,
            })
            .collect(),
        prune_tau_sigma: GrowthSchedule::DEFAULT_PRUNE_TAU,
    };
    let mut c = FitConfig::new(schedule);
    c.reg = RegConfig {
        lambda_dv: a.lambda_dv,
        tau: a.tau,
        lambda_tv: a.lambda_tv,
        lambda_cvg_fg: a.lambda_cvg_fg,
        lambda_cvg_bg: a.lambda_cvg_bg,
        eta_fg: a.eta_fg,
        eta_bg: a.eta_bg,
        ..c.reg
    };
    c.lr_sigma = a.lr_sigma;
    c.lr_sh = a.lr_sh;
    c.lr_background = a.lr_background;
    c.seed = a.seed;
    c.checkpoint_every = a.checkpoint_every;
    c.log_wall_time = a.wall_time;
    c.background = match a.background {
        BackgroundArg::Image => BackgroundModel::Image,
        BackgroundArg::Uniform => BackgroundModel::Uniform,
        BackgroundArg::Fixed => {
            let color = match &a.background_color {
                Some(v) => color3(v)?,
                None => scene_bg.context("--background fixed needs --background-color")?,
            };
            BackgroundModel::Fixed(color)
        }
    };
    c.validate()?;
    Ok(c)
}

fn write_line(w: &mut impl Write, v: &impl serde::Serialize) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn fit_cmd(a: FitArgs) -> anyhow::Result<()> {
    let data = io::read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let scene_bg = io::read_scene_file(&a.data).ok().map(|s| s.config.background);
    let config = fit_config(&a, scene_bg)?;
    fs::create_dir_all(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    if config.checkpoint_every.is_some() {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut log = BufWriter::new(File::create(a.out.join("log.jsonl"))?);
    write_line(&mut log, &json!({ "flags": &config, "views": data.len(), "threads": a.threads }))?;
    let start = Instant::now();
    let result = fit(&data, &config, &mut |e| {
        let io_err = |e: anyhow::Error| crate::Error::InvalidState(format!("{e:#}"));
        match e {
            FitEvent::Iteration(r) => {
                write_line(&mut log, r).map_err(io_err)?;
                if a.progress > 0 && r.iter % a.progress == 0 {
                    eprintln!("iter {} stage {} mse {:.3e} psnr {:.2}", r.iter, r.stage, r.mse, r.psnr);
                }
            }
            FitEvent::Grown { stage, pruned_to, grid } => {
                let ev = json!({ "event": "grown", "stage": stage, "pruned_to": pruned_to,
                    "resolution": grid.resolution(), "voxels": grid.len() });
                write_line(&mut log, &ev).map_err(io_err)?;
            }
            FitEvent::Checkpoint { iter, grid, background } => {
                io::write_grid(&ckpt_dir.join(format!("iter_{iter:06}.vxg")), grid)?;
                io::write_png(&ckpt_dir.join(format!("iter_{iter:06}_bg.png")), background)?;
            }
        }
        Ok(())
    });
    log.flush()?;
    let result = result?;
    io::write_grid(&a.out.join("grid.vxg"), &result.grid)?;
    io::write_png(&a.out.join("background.png"), &result.background)?;
    let last = result.log.last().context("fit produced no iterations")?;
    print_json(&json!({
        "out": a.out,
        "iterations": last.iter,
        "mse": last.mse,
        "psnr": last.psnr,
        "voxels": result.grid.len(),
        "sparsity": result.grid.sparsity(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn load_background(a: &RenderArgs, w: u32, h: u32) -> anyhow::Result<Background> {
    if let Some(p) = &a.background_image {
        let img = io::read_png(p)?;
        return Ok(Background::Image(resize_background(&img, w, h)?));
    }
    Ok(Background::Constant(match &a.background {
        Some(v) => color3(v)?,
        None => [0.0; 3],
    }))
}

fn render_cmd(a: RenderArgs) -> anyhow::Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let cam = io::read_camera(&a.camera)?;
    let bg = load_background(&a, cam.width(), cam.height())?;
    let settings = RenderSettings {
        early_stop: !a.no_early_stop,
        ..Default::default()
    };
    let out = render_image(&grid, &cam, &bg, &settings)?;
    io::write_png(&a.out, &out.color)?;
    if let Some(p) = &a.depth {
        if p.extension().is_some_and(|e| e == "raw") {
            io::write_f32_raw(p, &out.depth)?;
        } else {
            io::write_png_gray(p, &out.depth)?;
        }
    }
    if let Some(p) = &a.alpha {
        io::write_png_unit(p, &out.alpha)?;
    }
    print_json(&json!({
        "out": a.out,
        "width": cam.width(),
        "height": cam.height(),
        "ms": out.stats.wall_ms,
        "samples": out.stats.samples_evaluated,
        "early_stopped": out.stats.rays_early_stopped,
    }))
}

fn prune_cmd(a: PruneArgs) -> anyhow::Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let o = &a.orbit;
    let cams = orbit_cameras(o.views, o.radius, o.elevation, Intrinsics::from_fov_y(o.resolution, o.resolution, o.fov))?;
    let th = PruneThresholds {
        tau_t: a.tau_t,
        tau_sigma: a.tau_sigma,
        attribution: if a.stencil {
            Attribution::Stencil
        } else {
            Attribution::ContainingVoxel
        },
    };
    let mask = fuse_visibility(&grid, &cams, &th, &RenderSettings::default())?;
    let pruned = grid.retain_mask(&mask)?;
    io::write_grid(&a.out, &pruned)?;
    print_json(&json!({
        "before": grid.len(),
        "after": pruned.len(),
        "sparsity_before": grid.sparsity(),
        "sparsity_after": pruned.sparsity(),
    }))
}

fn file_size(p: &Path) -> anyhow::Result<u64> {
    Ok(fs::metadata(p).with_context(|| format!("reading {}", p.display()))?.len())
}

fn stats_cmd(a: StatsArgs) -> anyhow::Result<()> {
    let grid = io::read_grid(&a.grid)?;
    print_json(&json!({
        "resolution": grid.resolution(),
        "voxels": grid.len(),
        "cells": grid.cell_count(),
        "sparsity": grid.sparsity(),
        "file_bytes": file_size(&a.grid)?,
        "bounds": grid.bounds().to_array(),
    }))
}

/// Mean wall time of `n` fit iterations on `grid`, with targets rendered from
/// the grid itself over an orbit.
pub fn time_fit_iterations(grid: &SparseVoxelGrid<f32>, image_res: u32, n: usize) -> crate::Result<f64> {
    let cams = orbit_cameras(16, 2.5, 0.3, Intrinsics::from_fov_y(image_res, image_res, 0.9))?;
    let bg = Background::Constant([0.0; 3]);
    let images = cams
        .iter()
        .map(|c| render_image(grid, c, &bg, &RenderSettings::default()).map(|o| o.color))
        .collect::<crate::Result<Vec<_>>>()?;
    let data = Dataset::new(images, cams)?;
    let mut config = FitConfig::new(GrowthSchedule::single(grid.resolution(), image_res, n.max(1) as u32));
    config.reg.eta_fg = RegConfig::ETA_FG_SPARSE;
    let mut trainer = Trainer::new(grid.clone(), ColorImage::filled(image_res, image_res, [0.0; 3]), &config);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = Instant::now();
    for i in 0..n {
        trainer.step(&data, &config, &mut rng, i as u64)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / n.max(1) as f64)
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<()> {
    if a.frames == 0 {
        bail!("--frames must be at least 1");
    }
    let t0 = Instant::now();
    let grid = io::read_grid(&a.grid)?;
    let load_ms = t0.elapsed().as_secs_f64() * 1e3;
    let cams = orbit_cameras(a.frames, 2.5, 0.3, Intrinsics::from_fov_y(a.resolution, a.resolution, 0.9))?;
    let settings = RenderSettings {
        early_stop: !a.no_early_stop,
        ..Default::default()
    };
    let bg = Background::Constant([0.0; 3]);
    let t1 = Instant::now();
    for cam in &cams {
        render_image(&grid, cam, &bg, &settings)?;
    }
    let frame_ms = t1.elapsed().as_secs_f64() * 1e3 / a.frames as f64;
    let fit_ms = if a.fit_iters > 0 {
        Some(time_fit_iterations(&grid, a.fit_image_res, a.fit_iters)?)
    } else {
        None
    };
    print_json(&json!({
        "grid_resolution": grid.resolution(),
        "voxels": grid.len(),
        "frames": a.frames,
        "resolution": a.resolution,
        "load_ms": load_ms,
        "frame_ms": frame_ms,
        "fps": 1e3 / frame_ms,
        "fit_iteration_ms": fit_ms,
        "frame_to_fit_ratio": fit_ms.map(|f| frame_ms / f),
        "threads": rayon::current_num_threads(),
    }))
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = GradcheckConfig {
        seeds: a.seeds,
        first_seed: a.first_seed,
        ..Default::default()
    };
    let rep = run_suite(&cfg)?;
    for (term, worst, n) in rep.worst_by_term() {
        let status = if worst < rep.tolerance { "PASS" } else { "FAIL" };
        println!("{status} {:<11} max_rel_err {worst:.3e} over {n} parameters", term.name());
    }
    println!("rays checked {}/{}", rep.rays_checked, rep.rays_total);
    if !rep.passed() {
        bail!("gradient check failed (tolerance {:.0e})", rep.tolerance);
    }
    Ok(())
}
