//! Differentiable per-view objective: render, blend with the background,
//! score against a target and backpropagate into the grid.

use std::time::Instant;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gradients::{backprop_into_grid, GradientBuffer, RayUpstream};
use crate::grid::{Scalar, SparseVoxelGrid};
use crate::losses::{self, CoverageSide, LossReport, RegConfig};
use crate::raster::ColorImage;
use crate::render::{assemble, render_rays, Background, RenderOutput, RenderSettings};

/// Where the adjoints of one evaluation go, and with what weight.
pub struct GradTarget<'a> {
    pub grid: &'a mut GradientBuffer,
    /// Same layout as the background image.
    pub background: &'a mut [[f64; 3]],
    pub weight: f64,
}

/// `mse + L_DV + L_cvg^fg + L_cvg^bg` for one view (TV is a grid term and is
/// evaluated separately). Returns the unweighted report and the render.
pub fn view_objective<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    cam: &Camera,
    target: &ColorImage,
    background: &ColorImage,
    reg: &RegConfig,
    settings: &RenderSettings,
    grads: Option<GradTarget<'_>>,
) -> Result<(LossReport, RenderOutput)> {
    let (w, h) = (cam.width(), cam.height());
    if target.width != w || target.height != h {
        return Err(Error::invalid(format!(
            "target is {}x{} but the camera renders {w}x{h}",
            target.width, target.height
        )));
    }
    let bg = Background::Image(background.clone());
    bg.check_size(w, h)?;
    let start = Instant::now();
    let rays = render_rays(grid, cam, settings, grads.is_some());
    let out = assemble(&rays, w, h, &bg, start);

    let tau = reg.tau_for(grid.voxel_size());
    let mse = losses::mse(&out.color, target)?;
    let l_dv = losses::l_dv(&out.depth_var.data, &out.alpha.data, reg.lambda_dv, tau)?;
    let fg = losses::l_cvg(&out.alpha.data, reg.eta_fg, reg.lambda_cvg_fg, CoverageSide::Foreground);
    let bgl = losses::l_cvg(&out.alpha.data, reg.eta_bg, reg.lambda_cvg_bg, CoverageSide::Background);
    let report = LossReport::new(mse, l_dv, 0.0, fg, bgl);

    if let Some(gt) = grads {
        let k = gt.weight;
        let g_pix = losses::mse_grad(&out.color, target)?;
        let g_var = losses::l_dv_grad(&out.depth_var.data, &out.alpha.data, reg.lambda_dv, tau)?;
        let g_mask = losses::l_cvg_grad(&out.alpha.data, reg.eta_fg, reg.lambda_cvg_fg, CoverageSide::Foreground)
            + losses::l_cvg_grad(&out.alpha.data, reg.eta_bg, reg.lambda_cvg_bg, CoverageSide::Background);
        for (i, ray) in rays.iter().enumerate() {
            let b = background.data[i];
            let gp = g_pix[i];
            // pixel = c_r + (1 − a)·bg
            let up = RayUpstream {
                color: gp.map(|v| k * v),
                opacity: k * (g_mask - (gp[0] * b[0] + gp[1] * b[1] + gp[2] * b[2])),
                depth: 0.0,
                depth_var: k * g_var[i],
            };
            for c in 0..3 {
                gt.background[i][c] += k * gp[c] * (1.0 - ray.opacity);
            }
            backprop_into_grid(grid, gt.grid, ray, &up)?;
        }
    }
    Ok((report, out))
}
