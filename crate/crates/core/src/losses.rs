//! Reconstruction loss and regularizers.
//!
//! * depth variance: `λ_DV · max(Var(ẑ), τ)` per ray, averaged over rays with
//!   non-zero coverage;
//! * total variation of the raw density over the full `R³` lattice, exact or
//!   estimated from random contiguous runs of cells;
//! * coverage hinges on the mean foreground mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::GradientBuffer;
use crate::grid::{Scalar, SparseVoxelGrid};
use crate::raster::ColorImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TvMode {
    Exact,
    /// `segments` runs of `length` consecutive cells in linear index order.
    Stochastic { segments: u32, length: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda_dv: f64,
    /// Surface thickness threshold in world units². `None` means `(1.5·δ₀)²`
    /// for the current voxel size.
    pub tau: Option<f64>,
    pub lambda_tv: f64,
    pub lambda_cvg_fg: f64,
    pub lambda_cvg_bg: f64,
    pub eta_fg: f64,
    pub eta_bg: f64,
    pub tv_mode: TvMode,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_dv: 0.01,
            tau: None,
            lambda_tv: 1e-5,
            lambda_cvg_fg: 0.1,
            lambda_cvg_bg: 0.1,
            eta_fg: 0.4,
            eta_bg: 0.1,
            tv_mode: TvMode::Stochastic {
                segments: 256,
                length: 64,
            },
        }
    }
}

impl RegConfig {
    /// Coverage target for scenes whose object fills a small part of the frame.
    pub const ETA_FG_SPARSE: f64 = 0.1;

    pub fn tau_for(&self, voxel_size: f64) -> f64 {
        self.tau.unwrap_or_else(|| (1.5 * voxel_size).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_dv, self.lambda_tv, self.lambda_cvg_fg, self.lambda_cvg_bg];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("regularizer weights must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta_fg) || !(0.0..=1.0).contains(&self.eta_bg) {
            return Err(Error::invalid("coverage targets must lie in [0, 1]"));
        }
        if self.tau.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::invalid("tau must be >= 0"));
        }
        if let TvMode::Stochastic { segments, length } = self.tv_mode {
            if segments == 0 || length == 0 {
                return Err(Error::invalid("stochastic TV needs segments and length >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub l_dv: f64,
    pub l_tv: f64,
    pub l_cvg_fg: f64,
    pub l_cvg_bg: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(mse: f64, l_dv: f64, l_tv: f64, l_cvg_fg: f64, l_cvg_bg: f64) -> Self {
        let l_reg = l_dv + l_tv + l_cvg_fg + l_cvg_bg;
        LossReport {
            mse,
            l_dv,
            l_tv,
            l_cvg_fg,
            l_cvg_bg,
            l_reg,
            total: mse + l_reg,
        }
    }

    pub fn psnr(&self) -> f64 {
        psnr(self.mse)
    }
}

pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("map sizes differ ({a} vs {b})")));
    }
    Ok(())
}

/// Mean of `λ_DV·max(Var, τ)` over rays with coverage `> 0`.
pub fn l_dv(depth_var: &[f64], alpha: &[f64], lambda: f64, tau: f64) -> Result<f64> {
    check_len(depth_var.len(), alpha.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, a) in depth_var.iter().zip(alpha) {
        if *a > 0.0 {
            sum += v.max(tau);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { lambda * sum / n as f64 })
}

/// `∂L_DV/∂Var` per ray. Zero on the clamped plateau.
pub fn l_dv_grad(depth_var: &[f64], alpha: &[f64], lambda: f64, tau: f64) -> Result<Vec<f64>> {
    check_len(depth_var.len(), alpha.len())?;
    let n = alpha.iter().filter(|a| **a > 0.0).count();
    Ok(depth_var
        .iter()
        .zip(alpha)
        .map(|(v, a)| if *a > 0.0 && *v > tau { lambda / n as f64 } else { 0.0 })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverageSide {
    Foreground,
    Background,
}

/// Hinge on the mean mask: `λ·max(0, η − mean(m))` for the foreground,
/// `λ·max(0, η − mean(1 − m))` for the background.
pub fn l_cvg(mask: &[f64], eta: f64, lambda: f64, side: CoverageSide) -> f64 {
    let mean = mask.iter().sum::<f64>() / mask.len().max(1) as f64;
    let covered = match side {
        CoverageSide::Foreground => mean,
        CoverageSide::Background => 1.0 - mean,
    };
    lambda * (eta - covered).max(0.0)
}

/// `∂L_cvg/∂m_i`, identical for every pixel.
pub fn l_cvg_grad(mask: &[f64], eta: f64, lambda: f64, side: CoverageSide) -> f64 {
    let n = mask.len().max(1) as f64;
    let mean = mask.iter().sum::<f64>() / n;
    match side {
        CoverageSide::Foreground if eta - mean > 0.0 => -lambda / n,
        CoverageSide::Background if eta - (1.0 - mean) > 0.0 => lambda / n,
        _ => 0.0,
    }
}

/// Mean squared error over all pixels and channels.
pub fn mse(rendered: &ColorImage, target: &ColorImage) -> Result<f64> {
    if !rendered.same_size(target) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * rendered.data.len()).max(1) as f64)
}

/// `∂mse/∂rendered` per pixel.
pub fn mse_grad(rendered: &ColorImage, target: &ColorImage) -> Result<Vec<[f64; 3]>> {
    if !rendered.same_size(target) {
        return Err(Error::invalid("image sizes differ"));
    }
    let k = 2.0 / (3 * rendered.data.len()).max(1) as f64;
    Ok(rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| [k * (a[0] - b[0]), k * (a[1] - b[1]), k * (a[2] - b[2])])
        .collect())
}

/// Raw density of a lattice cell; unoccupied cells read as zero.
#[inline]
fn raw_at<T: Scalar>(grid: &SparseVoxelGrid<T>, lin: u64) -> (f64, Option<usize>) {
    match grid.slot(lin) {
        Some(s) => (grid.sigma_raw(s), Some(s)),
        None => (0.0, None),
    }
}

/// TV term of one cell, optionally adding `scale·∂term` into `grad`.
/// Forward neighbors beyond the lattice contribute no difference.
fn tv_cell<T: Scalar>(grid: &SparseVoxelGrid<T>, lin: u64, scale: f64, grad: Option<&mut GradientBuffer>) -> f64 {
    let r = grid.resolution() as u64;
    let coords = grid.lattice_coords(lin);
    let strides = [r * r, r, 1];
    let (s0, slot0) = raw_at(grid, lin);
    let mut diffs = [0.0; 3];
    let mut slots = [None; 3];
    for a in 0..3 {
        if (coords[a] as u64) + 1 < r {
            let (s1, sl) = raw_at(grid, lin + strides[a]);
            diffs[a] = s0 - s1;
            slots[a] = sl;
        }
    }
    let norm = (diffs[0] * diffs[0] + diffs[1] * diffs[1] + diffs[2] * diffs[2]).sqrt();
    if let Some(g) = grad {
        if norm > 0.0 {
            if let Some(s) = slot0 {
                g.sigma[s] += scale * (diffs[0] + diffs[1] + diffs[2]) / norm;
            }
            for a in 0..3 {
                if let Some(s) = slots[a] {
                    g.sigma[s] -= scale * diffs[a] / norm;
                }
            }
        }
    }
    norm
}

/// Exact TV: sums the terms of every cell that can be non-zero, i.e. occupied
/// cells and their backward neighbors.
fn tv_exact_sum<T: Scalar>(grid: &SparseVoxelGrid<T>, scale: f64, mut grad: Option<&mut GradientBuffer>) -> f64 {
    let r = grid.resolution() as u64;
    let strides = [r * r, r, 1];
    let mut sum = 0.0;
    for &lin in grid.indices() {
        sum += tv_cell(grid, lin, scale, grad.as_deref_mut());
        let c = grid.lattice_coords(lin);
        for a in 0..3 {
            if c[a] == 0 {
                continue;
            }
            let u = lin - strides[a];
            if grid.occupancy().contains(u) {
                continue;
            }
            // Visit an empty cell once: from its first occupied forward
            // neighbor in x, y, z order.
            let uc = grid.lattice_coords(u);
            let claimed = (0..a).any(|b| (uc[b] as u64) + 1 < r && grid.occupancy().contains(u + strides[b]));
            if !claimed {
                sum += tv_cell(grid, u, scale, grad.as_deref_mut());
            }
        }
    }
    sum
}

/// `λ_TV · (1/R³) · Σ_v sqrt(Δx² + Δy² + Δz²)` over raw densities. In
/// stochastic mode the sum is estimated without bias from random runs of
/// cells (start uniform, wrapping around the end of the lattice). Gradients
/// of the evaluated terms are added into `grad` when given.
pub fn l_tv<T: Scalar, R: Rng>(
    grid: &SparseVoxelGrid<T>,
    lambda: f64,
    mode: TvMode,
    rng: &mut R,
    grad: Option<&mut GradientBuffer>,
) -> f64 {
    let cells = grid.cell_count();
    let norm = lambda / cells as f64;
    match mode {
        TvMode::Exact => norm * tv_exact_sum(grid, norm, grad),
        TvMode::Stochastic { segments, length } => {
            let k = cells as f64 / (segments as f64 * length as f64);
            let scale = norm * k;
            let mut grad = grad;
            let mut sum = 0.0;
            for _ in 0..segments {
                let start = rng.gen_range(0..cells);
                for o in 0..length as u64 {
                    let lin = (start + o) % cells;
                    sum += tv_cell(grid, lin, scale, grad.as_deref_mut());
                }
            }
            scale * sum
        }
    }
}
