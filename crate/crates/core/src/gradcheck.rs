//! Finite-difference gradient suite on small random problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{orbit_camera, Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::gradients::{
    backprop_into_grid, backprop_ray, fd_check, flatten_gradient, grid_params, relative_error, set_grid_params,
    GradientBuffer, RayUpstream,
};
use crate::grid::{Bounds, SparseVoxelGrid};
use crate::losses::{self, CoverageSide, RegConfig, TvMode};
use crate::pipeline::{view_objective, GradTarget};
use crate::raster::ColorImage;
use crate::render::{assemble, composite_with, render_rays, Background, DepthVariance, RenderSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Per-sample adjoints of single rays.
    Composite,
    Mse,
    DepthVariance,
    TotalVariation,
    Coverage,
    EndToEnd,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Composite,
        Term::Mse,
        Term::DepthVariance,
        Term::TotalVariation,
        Term::Coverage,
        Term::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Composite => "composite",
            Term::Mse => "mse",
            Term::DepthVariance => "l_dv",
            Term::TotalVariation => "l_tv",
            Term::Coverage => "l_cvg",
            Term::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub resolution: u32,
    pub image_size: u32,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            first_seed: 0,
            resolution: 8,
            image_size: 4,
            h: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermResult {
    pub term: Term,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<TermResult>,
    pub tolerance: f64,
    /// Rays whose per-sample density adjoint was checked.
    pub rays_checked: usize,
    pub rays_total: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty()
            && self.rays_checked == self.rays_total
            && self.results.iter().all(|r| r.checked > 0 && r.max_rel_err < self.tolerance)
    }

    /// Largest error per term over all seeds.
    pub fn worst_by_term(&self) -> Vec<(Term, f64, usize)> {
        Term::ALL
            .iter()
            .map(|t| {
                let rs = self.results.iter().filter(|r| r.term == *t);
                let (worst, n) = rs.fold((0.0f64, 0usize), |(w, n), r| (w.max(r.max_rel_err), n + r.checked));
                (*t, worst, n)
            })
            .collect()
    }
}

struct Problem {
    grid: SparseVoxelGrid<f64>,
    cam: Camera,
    target: ColorImage,
    background: ColorImage,
}

fn random_image(rng: &mut ChaCha8Rng, n: u32) -> ColorImage {
    let mut img = ColorImage::filled(n, n, [0.0; 3]);
    for p in &mut img.data {
        *p = [rng.gen(), rng.gen(), rng.gen()];
    }
    img
}

fn problem(seed: u64, cfg: &GradcheckConfig) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.resolution;
    let cells = (r as u64).pow(3);
    // Positive raw densities keep every interpolated σ away from the ReLU
    // kink; a fifth of the cells are left empty.
    let voxels: Vec<(u64, f64, [f64; 3])> = (0..cells)
        .filter_map(|lin| {
            rng.gen_bool(0.8).then(|| {
                (
                    lin,
                    rng.gen_range(0.2..3.0),
                    [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                )
            })
        })
        .collect();
    let grid = SparseVoxelGrid::<f64>::from_voxels(r, Bounds::default(), voxels)?;
    let intr = Intrinsics::from_fov_y(cfg.image_size, cfg.image_size, 0.7);
    let cam = orbit_camera(
        rng.gen_range(0.0..std::f64::consts::TAU),
        3.0,
        rng.gen_range(-0.5..0.5),
        intr,
    )?;
    let target = random_image(&mut rng, cfg.image_size);
    let background = random_image(&mut rng, cfg.image_size);
    Ok(Problem {
        grid,
        cam,
        target,
        background,
    })
}

fn settings() -> RenderSettings {
    RenderSettings::exhaustive()
}

/// One isolated loss term through the full renderer.
fn term_objective(p: &Problem, grid: &SparseVoxelGrid<f64>, term: Term, grad: Option<&mut GradientBuffer>) -> Result<f64> {
    let s = settings();
    let (w, h) = (p.cam.width(), p.cam.height());
    let rays = render_rays(grid, &p.cam, &s, grad.is_some());
    let bg = Background::Image(p.background.clone());
    let out = assemble(&rays, w, h, &bg, std::time::Instant::now());
    let n = rays.len();
    let (value, ups): (f64, Vec<RayUpstream>) = match term {
        Term::Mse => {
            let g = losses::mse_grad(&out.color, &p.target)?;
            let ups = (0..n)
                .map(|i| {
                    let b = p.background.data[i];
                    RayUpstream {
                        color: g[i],
                        opacity: -(g[i][0] * b[0] + g[i][1] * b[1] + g[i][2] * b[2]),
                        ..Default::default()
                    }
                })
                .collect();
            (losses::mse(&out.color, &p.target)?, ups)
        }
        Term::DepthVariance => {
            let g = losses::l_dv_grad(&out.depth_var.data, &out.alpha.data, 1.0, 0.0)?;
            let ups = g
                .iter()
                .map(|v| RayUpstream {
                    depth_var: *v,
                    ..Default::default()
                })
                .collect();
            (losses::l_dv(&out.depth_var.data, &out.alpha.data, 1.0, 0.0)?, ups)
        }
        Term::Coverage => {
            // Targets of 1 keep both hinges active.
            let a = &out.alpha.data;
            let v = losses::l_cvg(a, 1.0, 1.0, CoverageSide::Foreground)
                + losses::l_cvg(a, 1.0, 1.0, CoverageSide::Background);
            let g = losses::l_cvg_grad(a, 1.0, 1.0, CoverageSide::Foreground)
                + losses::l_cvg_grad(a, 1.0, 1.0, CoverageSide::Background);
            let ups = vec![
                RayUpstream {
                    opacity: g,
                    ..Default::default()
                };
                n
            ];
            (v, ups)
        }
        _ => return Err(Error::invalid(format!("{} is not a per-view term", term.name()))),
    };
    if let Some(buf) = grad {
        for (ray, up) in rays.iter().zip(&ups) {
            backprop_into_grid(grid, buf, ray, up)?;
        }
    }
    Ok(value)
}

/// Parameters with a non-zero analytic adjoint, plus every tenth of the rest
/// so that missing gradients are caught too.
fn subset(analytic: &[f64]) -> Vec<usize> {
    (0..analytic.len())
        .filter(|i| analytic[*i] != 0.0 || i % 10 == 0)
        .collect()
}

fn check_grid_term(p: &Problem, term: Term, seed: u64, cfg: &GradcheckConfig) -> Result<TermResult> {
    let x0 = grid_params(&p.grid);
    let mut buf = GradientBuffer::for_grid(&p.grid);
    let mut f: Box<dyn FnMut(&[f64]) -> f64> = match term {
        Term::TotalVariation => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            losses::l_tv(&p.grid, 1.0, TvMode::Exact, &mut rng, Some(&mut buf));
            let base = p.grid.clone();
            Box::new(move |x: &[f64]| {
                let mut g = base.clone();
                set_grid_params(&mut g, x);
                losses::l_tv(&g, 1.0, TvMode::Exact, &mut rng, None)
            })
        }
        _ => {
            term_objective(p, &p.grid, term, Some(&mut buf))?;
            Box::new(|x: &[f64]| {
                let mut g = p.grid.clone();
                set_grid_params(&mut g, x);
                term_objective(p, &g, term, None).unwrap_or(f64::NAN)
            })
        }
    };
    let analytic = flatten_gradient(&buf);
    let rep = fd_check(&mut f, &x0, &analytic, &subset(&analytic), cfg.h)?;
    Ok(TermResult {
        term,
        seed,
        checked: rep.checked,
        max_rel_err: rep.max_rel_err,
        analytic: rep.analytic,
        numeric: rep.numeric,
    })
}

/// Whole objective with every regularizer active, over grid and background
/// parameters together.
fn check_end_to_end(p: &Problem, seed: u64, cfg: &GradcheckConfig) -> Result<TermResult> {
    let reg = RegConfig {
        tau: Some(0.0),
        eta_fg: 1.0,
        eta_bg: 1.0,
        tv_mode: TvMode::Exact,
        ..Default::default()
    };
    let s = settings();
    let mut buf = GradientBuffer::for_grid(&p.grid);
    let mut gbg = vec![[0.0; 3]; p.background.data.len()];
    view_objective(
        &p.grid,
        &p.cam,
        &p.target,
        &p.background,
        &reg,
        &s,
        Some(GradTarget {
            grid: &mut buf,
            background: &mut gbg,
            weight: 1.0,
        }),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    losses::l_tv(&p.grid, reg.lambda_tv, TvMode::Exact, &mut rng, Some(&mut buf));
    let ng = grid_params(&p.grid).len();
    let mut x0 = grid_params(&p.grid);
    x0.extend(p.background.data.iter().flatten());
    let mut analytic = flatten_gradient(&buf);
    analytic.extend(gbg.iter().flatten());

    let f = |x: &[f64]| {
        let mut g = p.grid.clone();
        set_grid_params(&mut g, &x[..ng]);
        let mut bg = p.background.clone();
        for (px, v) in bg.data.iter_mut().zip(x[ng..].chunks_exact(3)) {
            *px = [v[0], v[1], v[2]];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tv = losses::l_tv(&g, reg.lambda_tv, TvMode::Exact, &mut rng, None);
        view_objective(&g, &p.cam, &p.target, &bg, &reg, &s, None)
            .map(|(r, _)| r.total + tv)
            .unwrap_or(f64::NAN)
    };
    let rep = fd_check(f, &x0, &analytic, &subset(&analytic), cfg.h)?;
    Ok(TermResult {
        term: Term::EndToEnd,
        seed,
        checked: rep.checked,
        max_rel_err: rep.max_rel_err,
        analytic: rep.analytic,
        numeric: rep.numeric,
    })
}

/// Checks `δ_i[C_i T_i − Σ_{k≥i} C_k w_k]` and the color adjoints of every
/// primary ray against finite differences of the compositor, in both depth
/// variance modes. Returns the result and the number of rays checked.
fn check_rays(p: &Problem, seed: u64, cfg: &GradcheckConfig) -> Result<(TermResult, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rays = render_rays(&p.grid, &p.cam, &settings(), true);
    let mut result = TermResult {
        term: Term::Composite,
        seed,
        checked: 0,
        max_rel_err: 0.0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut checked_rays = 0;
    for (ri, ray) in rays.iter().enumerate() {
        let Some(chain) = &ray.chain else { continue };
        if chain.samples.is_empty() {
            continue;
        }
        let mode = if ri % 2 == 0 {
            DepthVariance::Normalized
        } else {
            DepthVariance::Literal
        };
        let up = RayUpstream {
            color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            opacity: rng.gen_range(-1.0..1.0),
            depth: rng.gen_range(-1.0..1.0),
            depth_var: rng.gen_range(-1.0..1.0),
        };
        let base = composite_with(&chain.samples, mode);
        let grads = backprop_ray(&base, &up)?;
        let objective = |samples: &[crate::render::RaySample]| {
            let r = composite_with(samples, mode);
            (0..3).map(|c| up.color[c] * r.color[c]).sum::<f64>()
                + up.opacity * r.opacity
                + up.depth * r.depth
                + up.depth_var * r.depth_var
        };
        let mut samples = chain.samples.clone();
        for i in 0..samples.len() {
            let mut pairs = vec![(grads[i].sigma, 3usize)];
            pairs.extend((0..3).map(|c| (grads[i].color[c], c)));
            for (analytic, which) in pairs {
                let orig = samples[i];
                let eval = |samples: &mut Vec<crate::render::RaySample>, d: f64| {
                    if which == 3 {
                        samples[i].sigma = orig.sigma + d;
                    } else {
                        samples[i].color[which] = orig.color[which] + d;
                    }
                    let v = objective(samples);
                    samples[i] = orig;
                    v
                };
                let numeric = (eval(&mut samples, cfg.h) - eval(&mut samples, -cfg.h)) / (2.0 * cfg.h);
                let err = relative_error(analytic, numeric);
                if result.checked == 0 || err > result.max_rel_err {
                    result.max_rel_err = err;
                    result.analytic = analytic;
                    result.numeric = numeric;
                }
                result.checked += 1;
            }
        }
        checked_rays += 1;
    }
    Ok((result, checked_rays, rays.len()))
}

/// Runs every term on `cfg.seeds` random problems.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.seeds == 0 || cfg.image_size == 0 {
        return Err(Error::invalid("gradient suite needs at least one seed and a non-empty image"));
    }
    let mut report = GradcheckReport {
        tolerance: cfg.tolerance,
        ..Default::default()
    };
    for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
        let p = problem(seed, cfg)?;
        let (rays, checked, total) = check_rays(&p, seed, cfg)?;
        report.results.push(rays);
        report.rays_checked += checked;
        report.rays_total += total;
        for term in [Term::Mse, Term::DepthVariance, Term::TotalVariation, Term::Coverage] {
            report.results.push(check_grid_term(&p, term, seed, cfg)?);
        }
        report.results.push(check_end_to_end(&p, seed, cfg)?);
    }
    Ok(report)
}
