//! Acceptance suite: one PASS/FAIL line per criterion. Runs the sphere
//! benchmark fits once and shares them between criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfield::camera::{orbit_cameras, Intrinsics, Ray};
use voxfield::gradcheck::{run_suite, GradcheckConfig};
use voxfield::grid::{Bounds, Vec3};
use voxfield::io;
use voxfield::losses::psnr;
use voxfield::optimize::{evaluate, FitEvent, FitResult, Stage};
use voxfield::raster::quantize;
use voxfield::render::{composite, fuse_visibility, render_ray, sample_count, PruneThresholds, RaySample};
use voxfield::synth::{generate_dataset, DatasetConfig};
use voxfield::{fit, AnalyticScene, Background, Dataset, FitConfig, GrowthSchedule, RegConfig, RenderSettings, SparseVoxelGrid};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// Shared sphere benchmark

const FIT_IMAGE_RES: u32 = 64;

struct Benchmark {
    train: Dataset,
    held_out: Dataset,
}

struct Fitted {
    result: FitResult,
    held_out_psnr: f64,
    fused_sparsity: f64,
    /// Mean wall time of the iterations at the final grid resolution.
    final_stage_iter_ms: f64,
    seconds: f64,
}

fn benchmark() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(|| {
        let scene = AnalyticScene::sphere(0.5).unwrap();
        let cfg = DatasetConfig::default();
        assert_eq!((cfg.views, cfg.resolution), (16, 128));
        Benchmark {
            train: generate_dataset(&scene, &cfg).unwrap(),
            held_out: generate_dataset(&scene, &cfg.held_out()).unwrap(),
        }
    })
}

fn fit_config(lambda_dv: f64) -> FitConfig {
    let mut c = FitConfig::new(GrowthSchedule {
        stages: vec![
            Stage {
                grid_res: 32,
                image_res: FIT_IMAGE_RES,
                iterations: 2000,
            },
            Stage {
                grid_res: 64,
                image_res: FIT_IMAGE_RES,
                iterations: 2000,
            },
        ],
        prune_tau_sigma: GrowthSchedule::DEFAULT_PRUNE_TAU,
    });
    c.reg.lambda_dv = lambda_dv;
    c.reg.eta_fg = RegConfig::ETA_FG_SPARSE;
    c.log_wall_time = true;
    c
}

fn orbit16(res: u32) -> Vec<voxfield::Camera> {
    orbit_cameras(16, 2.5, 0.3, Intrinsics::from_fov_y(res, res, 0.9)).unwrap()
}

fn run_fit(lambda_dv: f64) -> Fitted {
    let b = benchmark();
    let config = fit_config(lambda_dv);
    let start = Instant::now();
    let result = fit(&b.train, &config, &mut |_: FitEvent<'_>| Ok(())).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let held = b.held_out.at_width(FIT_IMAGE_RES).unwrap();
    let mse = evaluate(&result.grid, &result.background, &held, &RenderSettings::default()).unwrap();
    let mask = fuse_visibility(&result.grid, &orbit16(128), &PruneThresholds::default(), &RenderSettings::default())
        .unwrap();
    let last_stage = config.schedule.stages.len() - 1;
    let times: Vec<f64> = result
        .log
        .iter()
        .filter(|r| r.stage == last_stage)
        .filter_map(|r| r.wall_ms)
        .collect();
    Fitted {
        held_out_psnr: psnr(mse),
        fused_sparsity: mask.sparsity(),
        final_stage_iter_ms: times.iter().sum::<f64>() / times.len() as f64,
        seconds,
        result,
    }
}

fn fitted_default() -> &'static Fitted {
    static F: OnceLock<Fitted> = OnceLock::new();
    F.get_or_init(|| run_fit(RegConfig::default().lambda_dv))
}

fn fitted_without_dv() -> &'static Fitted {
    static F: OnceLock<Fitted> = OnceLock::new();
    F.get_or_init(|| run_fit(0.0))
}

// ---------------------------------------------------------------------------
// 1. Rendering constants

fn criterion_1() -> Outcome {
    let s = RenderSettings::default();
    if (s.step_factor, s.sigma_skip, s.t_stop) != (0.5, 1e-10, 1e-7) || !s.skip_empty || !s.early_stop {
        return Err(format!("default settings {s:?}"));
    }
    let grid = SparseVoxelGrid::<f64>::new_dense(32, Bounds::default(), 0.0, [0.0; 3]).unwrap();
    let ray = Ray::new(Vec3::new(0.1, 0.2, -3.0), Vec3::new(0.0, 0.0, 1.0));
    let n = sample_count(&grid, &ray, &s);
    // 2 units / (0.5 · 2/32) = 64 half-voxel steps.
    let expected = (2.0 / (0.5 * grid.voxel_size())).round() as usize;
    if n != expected || n != 64 {
        return Err(format!("axis ray has {n} samples, expected {expected}"));
    }
    let all = render_ray(&grid, &ray, &RenderSettings::exhaustive(), true);
    let chain = all.chain.unwrap();
    let dt = chain.samples[1].depth - chain.samples[0].depth;
    if (dt - 0.5 * grid.voxel_size()).abs() > 1e-12 || chain.samples.iter().any(|x| x.delta != 0.5 * grid.voxel_size()) {
        return Err(format!("sample spacing {dt}"));
    }

    // Skip threshold: σ just below 1e-10 is skipped, just above is evaluated.
    // The end samples carry 3/4 of the stencil weight inside the box.
    for (sigma, evaluated) in [(0.9e-10, 0usize), (1.1e-10, 62), (1.4e-10, 64)] {
        let g = SparseVoxelGrid::<f64>::new_dense(32, Bounds::default(), sigma, [0.0; 3]).unwrap();
        let r = render_ray(&g, &ray, &s, false);
        if r.evaluated != evaluated {
            return Err(format!("σ={sigma:e}: {} samples evaluated, expected {evaluated}", r.evaluated));
        }
        let off = RenderSettings {
            skip_empty: false,
            ..s
        };
        if render_ray(&g, &ray, &off, false).evaluated != 64 {
            return Err("skipping disabled still skips".into());
        }
    }

    // Early stop: the first sample that drives T below 1e-7 is the last one.
    let sigma = 100.0;
    let g = SparseVoxelGrid::<f64>::new_dense(32, Bounds::default(), sigma, [0.0; 3]).unwrap();
    let r = render_ray(&g, &ray, &s, false);
    let per = (-sigma * 0.5 * g.voxel_size()).exp();
    let stop_at = (1..).find(|k| per.powi(*k) < 1e-7).unwrap() as usize;
    if !r.early_stopped || r.evaluated != stop_at || r.transmittance >= 1e-7 {
        return Err(format!("early stop after {} samples, expected {stop_at}", r.evaluated));
    }
    let prev = per.powi(stop_at as i32 - 1);
    if prev < 1e-7 {
        return Err("stopped late".into());
    }
    let full = render_ray(&g, &ray, &RenderSettings { early_stop: false, ..s }, false);
    if full.evaluated != 64 || full.early_stopped {
        return Err("early stop disabled still stops".into());
    }
    Ok(format!("step 0.5·δ₀, {n} samples on the axis ray at R=32, skip 1e-10, stop 1e-7 after {stop_at} samples"))
}

// ---------------------------------------------------------------------------
// 2. Compositing oracle

/// Straight transcription: T_i as explicit products, then weighted sums.
fn direct(samples: &[RaySample]) -> ([f64; 3], f64, f64, f64) {
    let alpha: Vec<f64> = samples.iter().map(|s| 1.0 - (-s.sigma * s.delta).exp()).collect();
    let w: Vec<f64> = (0..samples.len())
        .map(|i| alpha[..i].iter().map(|a| 1.0 - a).product::<f64>() * alpha[i])
        .collect();
    let a: f64 = w.iter().sum();
    let c = std::array::from_fn(|ch| (0..samples.len()).map(|i| w[i] * samples[i].color[ch]).sum());
    let z: f64 = (0..samples.len()).map(|i| w[i] * samples[i].depth).sum();
    let var = if a > 0.0 {
        let mu = z / a;
        (0..samples.len()).map(|i| w[i] * (samples[i].depth - mu).powi(2)).sum::<f64>() / a
    } else {
        0.0
    };
    (c, a, z, var)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(0..48);
        let mut z = rng.gen_range(0.5..3.0);
        let samples: Vec<RaySample> = (0..n)
            .map(|_| {
                let delta = rng.gen_range(0.005..0.1);
                z += delta;
                RaySample {
                    color: [rng.gen(), rng.gen(), rng.gen()],
                    sigma: if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..60.0) },
                    delta,
                    depth: z,
                }
            })
            .collect();
        let r = composite(&samples);
        let (c, a, zhat, var) = direct(&samples);
        let diffs = [
            (r.color[0] - c[0]).abs(),
            (r.color[1] - c[1]).abs(),
            (r.color[2] - c[2]).abs(),
            (r.opacity - a).abs(),
            (r.depth - zhat).abs(),
            (r.depth_var - var).abs(),
        ];
        worst = diffs.iter().fold(worst, |m, d| m.max(*d));
    }
    ensure(worst < 1e-12, format!("10⁴ rays, max abs difference {worst:.2e} (bound 1e-12)"))
}

// ---------------------------------------------------------------------------
// 3. Gradient suite

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let rep = run_suite(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let terms: Vec<String> = rep
        .worst_by_term()
        .iter()
        .map(|(t, e, _)| format!("{} {e:.1e}", t.name()))
        .collect();
    let seeds = rep.results.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len();
    ensure(
        rep.passed() && seeds >= 20 && secs < 60.0,
        format!(
            "{seeds} seeds, rays {}/{} checked, max rel err [{}] in {secs:.1}s",
            rep.rays_checked,
            rep.rays_total,
            terms.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Fit benchmark

/// Means of consecutive 200-iteration windows; each may exceed the previous
/// one by at most 5 %.
fn windows_monotone(mse: &[f64]) -> Result<usize, String> {
    let means: Vec<f64> = mse.chunks(200).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for (k, w) in means.windows(2).enumerate() {
        if w[1] > 1.05 * w[0] {
            return Err(format!("window {} mean {:.3e} > 1.05 × {:.3e}", k + 1, w[1], w[0]));
        }
    }
    Ok(means.len())
}

fn criterion_4() -> Outcome {
    let f = fitted_default();
    let mse: Vec<f64> = f.result.log.iter().map(|r| r.mse).collect();
    if mse.len() != 4000 {
        return Err(format!("{} iterations", mse.len()));
    }
    let windows = windows_monotone(&mse)?;
    ensure(
        f.held_out_psnr >= 30.0 && f.result.grid.resolution() == 64,
        format!(
            "held-out PSNR {:.2} dB (≥ 30), {windows} training-mse windows non-increasing within 5%, fit {:.0}s",
            f.held_out_psnr, f.seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Depth-variance ablation

fn criterion_5() -> Outcome {
    let with = fitted_default();
    let without = fitted_without_dv();
    let gain = 100.0 * (with.fused_sparsity - without.fused_sparsity);
    let drop = without.held_out_psnr - with.held_out_psnr;
    ensure(
        gain >= 3.0 && drop <= 1.0,
        format!(
            "fused sparsity {:.4} (λ_DV=0.01) vs {:.4} (λ_DV=0): {gain:+.2} pp (need ≥ 3); held-out PSNR {:.2} vs {:.2} dB: drop {drop:.2} dB (need ≤ 1)",
            with.fused_sparsity, without.fused_sparsity, with.held_out_psnr, without.held_out_psnr
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Pruning fidelity

fn criterion_6() -> Outcome {
    let f = fitted_default();
    let grid = &f.result.grid;
    let pruned = grid.prune_by_density(GrowthSchedule::DEFAULT_PRUNE_TAU, true);
    let bg = Background::Constant([0.0; 3]);
    let mut worst = 0u8;
    for cam in orbit16(128) {
        let a = voxfield::render_image(grid, &cam, &bg, &RenderSettings::default()).unwrap();
        let b = voxfield::render_image(&pruned, &cam, &bg, &RenderSettings::default()).unwrap();
        for (p, q) in a.color.data.iter().zip(&b.color.data) {
            for c in 0..3 {
                worst = worst.max(quantize(p[c]).abs_diff(quantize(q[c])));
            }
        }
    }
    ensure(
        worst <= 1,
        format!("{} → {} voxels, max 8-bit difference {worst} over 16 views", grid.len(), pruned.len()),
    )
}

// ---------------------------------------------------------------------------
// 7. Acceleration

fn criterion_7() -> Outcome {
    let grid = &fitted_default().result.grid;
    let cams = orbit16(128);
    let bg = Background::Constant([0.0; 3]);
    let time = |settings: &RenderSettings| {
        let start = Instant::now();
        let outs: Vec<_> = cams
            .iter()
            .map(|c| voxfield::render_image(grid, c, &bg, settings).unwrap())
            .collect();
        (outs, start.elapsed().as_secs_f64() * 1e3 / cams.len() as f64)
    };
    let (exact, slow_ms) = time(&RenderSettings::exhaustive());
    let (fast, fast_ms) = time(&RenderSettings::default());
    let mut worst = 0.0f64;
    let mut stopped = 0;
    for (a, b) in exact.iter().zip(&fast) {
        stopped += b.stats.rays_early_stopped;
        for (p, q) in a.color.data.iter().zip(&b.color.data) {
            for c in 0..3 {
                worst = worst.max((p[c] - q[c]).abs());
            }
        }
    }
    let speedup = slow_ms / fast_ms;
    ensure(
        worst < 1e-5 && speedup >= 2.0 && stopped > 0,
        format!(
            "max channel difference {worst:.1e}, {slow_ms:.1} ms → {fast_ms:.1} ms per 128² frame ({speedup:.1}× faster)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Amortized rendering

fn criterion_8(dir: &Path) -> Outcome {
    let f = fitted_default();
    let path = dir.join("sphere64.vxg");
    io::write_grid(&path, &f.result.grid).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_voxfield"))
        .args(["bench", "--grid", path.to_str().unwrap(), "--frames", "100", "--resolution", "256"])
        .args(["--fit-iters", "0"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let frame_ms = v["frame_ms"].as_f64().unwrap();
    let ratio = frame_ms / f.final_stage_iter_ms;
    ensure(
        v["grid_resolution"] == 64 && ratio <= 0.1,
        format!(
            "load {:.2} ms, {frame_ms:.2} ms per 256² frame ({:.1} FPS) vs {:.1} ms per 64³ fit iteration: ratio {ratio:.3} (≤ 0.1)",
            v["load_ms"].as_f64().unwrap(),
            v["fps"].as_f64().unwrap(),
            f.final_stage_iter_ms
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. File format and determinism

fn criterion_9(dir: &Path) -> Outcome {
    let grid = &fitted_default().result.grid;
    let path = dir.join("roundtrip.vxg");
    io::write_grid(&path, grid).map_err(|e| e.to_string())?;
    let back = io::read_grid(&path).map_err(|e| e.to_string())?;
    let bitwise = back.indices() == grid.indices()
        && back.density().iter().zip(grid.density()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.sh0().iter().zip(grid.sh0()).all(|(a, b)| (0..3).all(|c| a[c].to_bits() == b[c].to_bits()))
        && io::grid_to_bytes(&back) == std::fs::read(&path).unwrap();
    if !bitwise {
        return Err("grid round trip is not bitwise identical".into());
    }

    let bin = env!("CARGO_BIN_EXE_voxfield");
    let data = dir.join("det_data");
    let ok = Command::new(bin)
        .args(["synth", "--out", data.to_str().unwrap(), "--views", "8", "--resolution", "64", "--seed", "7"])
        .output()
        .map_err(|e| e.to_string())?;
    if !ok.status.success() {
        return Err(String::from_utf8_lossy(&ok.stderr).into_owned());
    }
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.join(format!("det_{name}"));
        let r = Command::new(bin)
            .args(["fit", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .args(["--grid-res", "16", "--grow", "32", "--iters", "100,50", "--image-res", "32"])
            .args(["--seed", "7", "--threads", "1", "--checkpoint-every", "50"])
            .output()
            .map_err(|e| e.to_string())?;
        if !r.status.success() {
            return Err(String::from_utf8_lossy(&r.stderr).into_owned());
        }
        runs.push(out);
    }
    let mut files = vec!["log.jsonl".to_string(), "grid.vxg".into(), "background.png".into()];
    for k in [50, 100, 150] {
        files.push(format!("checkpoints/iter_{k:06}.vxg"));
        files.push(format!("checkpoints/iter_{k:06}_bg.png"));
    }
    for f in &files {
        let a = std::fs::read(runs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(runs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!(
        "{}-voxel grid round-trips bitwise; two `fit --seed 7 --threads 1` runs match on {} files",
        grid.len(),
        files.len()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 rendering constants", Box::new(criterion_1)),
        ("2 compositing oracle", Box::new(criterion_2)),
        ("3 gradient suite", Box::new(criterion_3)),
        ("4 fit benchmark", Box::new(criterion_4)),
        ("5 depth-variance ablation", Box::new(criterion_5)),
        ("6 pruning fidelity", Box::new(criterion_6)),
        ("7 acceleration", Box::new(criterion_7)),
        ("8 amortized rendering", Box::new(|| criterion_8(dir.path()))),
        ("9 file format and determinism", Box::new(|| criterion_9(dir.path()))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
