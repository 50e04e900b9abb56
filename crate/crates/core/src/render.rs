//! Volume rendering of sparse grids.
//!
//! Samples are placed every half voxel along a ray, composited front to back:
//!
//! ```text
//! α_i = 1 − exp(−σ_i δ_i)      T_1 = 1,  T_{i+1} = T_i (1 − α_i)
//! c_r = Σ T_i α_i c_i          a_r = Σ T_i α_i
//! ẑ   = Σ T_i α_i z_i          Var(ẑ) = (1/a_r) Σ T_i α_i (z_i − μ)²
//! ```
//!
//! The variance is centered on `μ = ẑ/a_r` by default
//! ([`DepthVariance::Normalized`]) or on `ẑ` itself
//! ([`DepthVariance::Literal`]).
//!
//! With acceleration enabled, samples whose density is below
//! `sigma_skip` are skipped and marching stops once `T < t_stop`.

use std::time::Instant;

use rayon::prelude::*;

use crate::camera::{intersect_aabb, Camera, Ray};
use crate::error::{Error, Result};
use crate::grid::{activate_density, sigmoid, OccupancyMask, Scalar, SkipBlocks, SparseVoxelGrid, Vec3};
use crate::raster::{ColorImage, ScalarImage};

/// Center of the per-ray depth variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DepthVariance {
    /// `μ = ẑ/a_r`, the mean of the normalized weight distribution.
    #[default]
    Normalized,
    /// `μ = ẑ`. Partially covered rays then carry a `ẑ²(1 − a_r)²/…` bias
    /// that only vanishes as `a_r → 1`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Sample spacing in voxels.
    pub step_factor: f64,
    pub sigma_skip: f64,
    pub t_stop: f64,
    pub skip_empty: bool,
    pub early_stop: bool,
    pub depth_variance: DepthVariance,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            step_factor: 0.5,
            sigma_skip: 1e-10,
            t_stop: 1e-7,
            skip_empty: true,
            early_stop: true,
            depth_variance: DepthVariance::Normalized,
        }
    }
}

impl RenderSettings {
    /// Every sample evaluated, no early termination.
    pub fn exhaustive() -> Self {
        RenderSettings {
            skip_empty: false,
            early_stop: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_factor > 0.0) || !(self.sigma_skip >= 0.0) || !(self.t_stop >= 0.0) {
            return Err(Error::invalid("render settings need step > 0 and thresholds >= 0"));
        }
        Ok(())
    }
}

/// One point sample along a ray, after activation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RaySample {
    pub color: [f64; 3],
    pub sigma: f64,
    pub delta: f64,
    pub depth: f64,
}

/// Per-sample data kept for the backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleChain {
    pub samples: Vec<RaySample>,
    pub alpha: Vec<f64>,
    /// World positions of the samples; empty when the chain did not come
    /// from a grid.
    pub positions: Vec<Vec3>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayComposite {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub depth_var: f64,
    /// Transmittance left after the last composited sample.
    pub transmittance: f64,
    pub evaluated: usize,
    pub early_stopped: bool,
    pub variance_mode: DepthVariance,
    pub chain: Option<SampleChain>,
}

/// Front-to-back accumulator shared by [`composite`] and the ray marcher.
///
/// Depth moments are kept relative to the first depth seen so the variance
/// does not cancel catastrophically for distant surfaces.
#[derive(Clone, Debug)]
struct Accumulator {
    t: f64,
    color: [f64; 3],
    opacity: f64,
    z0: Option<f64>,
    m1: f64,
    m2: f64,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            t: 1.0,
            color: [0.0; 3],
            opacity: 0.0,
            z0: None,
            m1: 0.0,
            m2: 0.0,
        }
    }

    /// Returns α for the sample.
    #[inline]
    fn push(&mut self, s: &RaySample) -> f64 {
        let alpha = -(-s.sigma * s.delta).exp_m1();
        let w = self.t * alpha;
        for c in 0..3 {
            self.color[c] += w * s.color[c];
        }
        self.opacity += w;
        let z0 = *self.z0.get_or_insert(s.depth);
        let dz = s.depth - z0;
        self.m1 += w * dz;
        self.m2 += w * dz * dz;
        self.t *= 1.0 - alpha;
        alpha
    }

    fn finish(
        self,
        mode: DepthVariance,
        evaluated: usize,
        early_stopped: bool,
        chain: Option<SampleChain>,
    ) -> RayComposite {
        let z0 = self.z0.unwrap_or(0.0);
        let a = self.opacity;
        let depth = self.m1 + a * z0;
        let depth_var = if a > 0.0 {
            // Σ w (z − μ)² with every depth shifted by z0.
            let e = match mode {
                DepthVariance::Normalized => self.m1 / a,
                DepthVariance::Literal => self.m1 - (1.0 - a) * z0,
            };
            let s = self.m2 - 2.0 * e * self.m1 + e * e * a;
            (s / a).max(0.0)
        } else {
            0.0
        };
        RayComposite {
            color: self.color,
            opacity: a,
            depth,
            depth_var,
            transmittance: self.t,
            evaluated,
            early_stopped,
            variance_mode: mode,
            chain,
        }
    }
}

/// Composites an explicit sample list with the default variance; the chain
/// is retained.
pub fn composite(samples: &[RaySample]) -> RayComposite {
    composite_with(samples, DepthVariance::default())
}

pub fn composite_with(samples: &[RaySample], mode: DepthVariance) -> RayComposite {
    let mut acc = Accumulator::new();
    let alpha: Vec<f64> = samples.iter().map(|s| acc.push(s)).collect();
    let chain = SampleChain {
        samples: samples.to_vec(),
        alpha,
        positions: Vec::new(),
    };
    acc.finish(mode, samples.len(), false, Some(chain))
}

/// Sample parameters `t = t_near + (j + 0.5)·Δt` inside the ray's box interval.
pub fn sample_count<T: Scalar>(grid: &SparseVoxelGrid<T>, ray: &Ray, settings: &RenderSettings) -> usize {
    match intersect_aabb(ray, grid.bounds()) {
        Some(hit) => {
            let dt = settings.step_factor * grid.voxel_size();
            let mut n = 0;
            while hit.t_near + (n as f64 + 0.5) * dt < hit.t_far {
                n += 1;
            }
            n
        }
        None => 0,
    }
}

/// Index of the last sample before `ray` leaves the dead block around `p`.
/// Stopping one sample short keeps rounding at the block face harmless.
/// Walks the skip blocks along one ray.
struct BlockSkipper<'a> {
    blocks: &'a SkipBlocks,
    live_until: f64,
}

impl<'a> BlockSkipper<'a> {
    fn new(blocks: &'a SkipBlocks) -> Self {
        BlockSkipper {
            blocks,
            live_until: f64::NEG_INFINITY,
        }
    }

    /// For a sample at `t` inside a dead block, the index of the last sample
    /// before the ray leaves it. Stopping one sample short keeps rounding at
    /// the block face harmless.
    #[inline]
    fn skip_to<T: Scalar>(
        &mut self,
        grid: &SparseVoxelGrid<T>,
        ray: &Ray,
        t: f64,
        p: &Vec3,
        t_near: f64,
        dt: f64,
    ) -> Option<usize> {
        if t < self.live_until {
            return None;
        }
        let (live, lo, hi) = grid.skip_block(self.blocks, p)?;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            let d = ray.direction[a];
            if d != 0.0 {
                let face = if d > 0.0 { hi[a] } else { lo[a] };
                t_exit = t_exit.min((face - ray.origin[a]) / d);
            }
        }
        if live {
            self.live_until = t_exit;
            return None;
        }
        let first_out = ((t_exit - t_near) / dt - 0.5).ceil();
        Some(if first_out.is_finite() && first_out >= 1.0 { first_out as usize - 1 } else { 0 })
    }
}

/// Marches `ray` through the grid. With `retain_chain` the per-sample data
/// needed by the backward pass is kept.
pub fn render_ray<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    ray: &Ray,
    settings: &RenderSettings,
    retain_chain: bool,
) -> RayComposite {
    render_ray_with(grid, None, ray, settings, retain_chain)
}

/// [`render_ray`] that also jumps over blocks `blocks` marks skippable.
/// The result is identical; only the work differs.
pub fn render_ray_with<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    blocks: Option<&SkipBlocks>,
    ray: &Ray,
    settings: &RenderSettings,
    retain_chain: bool,
) -> RayComposite {
    let mut skipper = blocks.filter(|_| settings.skip_empty).map(BlockSkipper::new);
    let mut acc = Accumulator::new();
    let mut chain = retain_chain.then(SampleChain::default);
    let Some(hit) = intersect_aabb(ray, grid.bounds()) else {
        return acc.finish(settings.depth_variance, 0, false, chain);
    };
    let dt = settings.step_factor * grid.voxel_size();
    let mut evaluated = 0;
    let mut early = false;
    let mut j = 0usize;
    loop {
        let t = hit.t_near + (j as f64 + 0.5) * dt;
        if t >= hit.t_far {
            break;
        }
        j += 1;
        let p = ray.at(t);
        if let Some(next) = skipper.as_mut().and_then(|s| s.skip_to(grid, ray, t, &p, hit.t_near, dt)) {
            j = j.max(next);
            continue;
        }
        let Some(st) = grid.stencil(&p) else { continue };
        if settings.skip_empty && st.is_empty() {
            continue;
        }
        let sigma = activate_density(grid.interpolate_sigma(&st));
        if settings.skip_empty && sigma < settings.sigma_skip {
            continue;
        }
        evaluated += 1;
        let color = grid.interpolate_sh(&st).map(sigmoid);
        let sample = RaySample {
            color,
            sigma,
            delta: dt,
            depth: t,
        };
        let alpha = acc.push(&sample);
        if let Some(ch) = chain.as_mut() {
            ch.samples.push(sample);
            ch.alpha.push(alpha);
            ch.positions.push(p);
        }
        if settings.early_stop && acc.t < settings.t_stop {
            early = true;
            break;
        }
    }
    acc.finish(settings.depth_variance, evaluated, early, chain)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Constant([f64; 3]),
    Image(ColorImage),
}

impl Background {
    #[inline]
    pub fn at(&self, x: u32, y: u32) -> [f64; 3] {
        match self {
            Background::Constant(c) => *c,
            Background::Image(img) => img.pixel(x, y),
        }
    }

    pub fn check_size(&self, width: u32, height: u32) -> Result<()> {
        if let Background::Image(img) = self {
            if img.width != width || img.height != height {
                return Err(Error::invalid(format!(
                    "background is {}x{} but the camera renders {}x{}",
                    img.width, img.height, width, height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub samples_evaluated: u64,
    pub rays_early_stopped: u64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Foreground coverage `a_r` per pixel.
    pub alpha: ScalarImage,
    pub depth: ScalarImage,
    pub depth_var: ScalarImage,
    pub stats: RenderStats,
}

/// Blend of a ray's foreground with the background. `c_r` is already weighted
/// by coverage, so `a·(c_r/a) + (1−a)·bg = c_r + (1−a)·bg`.
#[inline]
pub fn blend(ray: &RayComposite, bg: [f64; 3]) -> [f64; 3] {
    let k = 1.0 - ray.opacity;
    [
        ray.color[0] + k * bg[0],
        ray.color[1] + k * bg[1],
        ray.color[2] + k * bg[2],
    ]
}

/// All primary rays of a camera, row-major, in parallel over rows.
pub fn render_rays<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    cam: &Camera,
    settings: &RenderSettings,
    retain_chain: bool,
) -> Vec<RayComposite> {
    let (w, h) = (cam.width(), cam.height());
    let blocks = settings.skip_empty.then(|| grid.skip_blocks(settings.sigma_skip));
    let rows: Vec<Vec<RayComposite>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                    render_ray_with(grid, blocks.as_ref(), &ray, settings, retain_chain)
                })
                .collect()
        })
        .collect();
    rows.into_iter().flatten().collect()
}

pub fn render_image<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    cam: &Camera,
    background: &Background,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    settings.validate()?;
    let (w, h) = (cam.width(), cam.height());
    background.check_size(w, h)?;
    let start = Instant::now();
    let rays = render_rays(grid, cam, settings, false);
    Ok(assemble(&rays, w, h, background, start))
}

pub(crate) fn assemble(rays: &[RayComposite], w: u32, h: u32, background: &Background, start: Instant) -> RenderOutput {
    let mut color = ColorImage::filled(w, h, [0.0; 3]);
    let mut alpha = ScalarImage::filled(w, h, 0.0);
    let mut depth = ScalarImage::filled(w, h, 0.0);
    let mut depth_var = ScalarImage::filled(w, h, 0.0);
    let mut stats = RenderStats::default();
    for (i, r) in rays.iter().enumerate() {
        let (x, y) = (i as u32 % w, i as u32 / w);
        color.data[i] = blend(r, background.at(x, y));
        alpha.data[i] = r.opacity;
        depth.data[i] = r.depth;
        depth_var.data[i] = r.depth_var;
        stats.samples_evaluated += r.evaluated as u64;
        stats.rays_early_stopped += r.early_stopped as u64;
    }
    stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    RenderOutput {
        color,
        alpha,
        depth,
        depth_var,
        stats,
    }
}

/// Which voxels a sample marks as visible during view pruning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Attribution {
    /// The voxel whose cell contains the sample position.
    #[default]
    ContainingVoxel,
    /// All occupied trilinear neighbors of the sample.
    Stencil,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneThresholds {
    pub tau_t: f64,
    pub tau_sigma: f64,
    pub attribution: Attribution,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            tau_t: 1e-4,
            tau_sigma: 1e-3,
            attribution: Attribution::ContainingVoxel,
        }
    }
}

fn visible_along_ray<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    blocks: Option<&SkipBlocks>,
    ray: &Ray,
    th: &PruneThresholds,
    settings: &RenderSettings,
    out: &mut Vec<u64>,
) {
    let Some(hit) = intersect_aabb(ray, grid.bounds()) else { return };
    let mut skipper = blocks.filter(|_| settings.skip_empty).map(BlockSkipper::new);
    let dt = settings.step_factor * grid.voxel_size();
    let mut trans = 1.0f64;
    let mut j = 0usize;
    loop {
        let t = hit.t_near + (j as f64 + 0.5) * dt;
        if t >= hit.t_far {
            break;
        }
        j += 1;
        let p = ray.at(t);
        if let Some(next) = skipper.as_mut().and_then(|s| s.skip_to(grid, ray, t, &p, hit.t_near, dt)) {
            j = j.max(next);
            continue;
        }
        let Some(st) = grid.stencil(&p) else { continue };
        if settings.skip_empty && st.is_empty() {
            continue;
        }
        let sigma = activate_density(grid.interpolate_sigma(&st));
        if settings.skip_empty && sigma < settings.sigma_skip {
            continue;
        }
        if trans > th.tau_t && sigma > th.tau_sigma {
            match th.attribution {
                Attribution::ContainingVoxel => {
                    if let Some([i, jj, k]) = grid.cell_of_point(&p) {
                        let lin = grid.linear_index(i, jj, k);
                        if grid.occupancy().contains(lin) {
                            out.push(lin);
                        }
                    }
                }
                Attribution::Stencil => {
                    for c in 0..8 {
                        if st.slots[c] != crate::grid::EMPTY_SLOT {
                            out.push(grid.indices()[st.slots[c] as usize]);
                        }
                    }
                }
            }
        }
        trans *= (-sigma * dt).exp();
        if settings.early_stop && trans < settings.t_stop {
            break;
        }
    }
}

/// Voxels seen from `cam`: kept iff some sample inside them has
/// `T_i > τ_T` and `σ_i > τ_σ`. Untouched voxels are dropped.
pub fn prune_view<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    cam: &Camera,
    th: &PruneThresholds,
    settings: &RenderSettings,
) -> Result<OccupancyMask> {
    if !(th.tau_t >= 0.0 && th.tau_sigma >= 0.0) {
        return Err(Error::invalid("pruning thresholds must be non-negative"));
    }
    let (w, h) = (cam.width(), cam.height());
    let blocks = settings.skip_empty.then(|| grid.skip_blocks(settings.sigma_skip));
    let rows: Vec<Vec<u64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut hits = Vec::new();
            for x in 0..w {
                let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                visible_along_ray(grid, blocks.as_ref(), &ray, th, settings, &mut hits);
            }
            hits
        })
        .collect();
    let mut mask = OccupancyMask::empty(grid.resolution());
    for lin in rows.into_iter().flatten() {
        mask.insert(lin);
    }
    Ok(mask)
}

/// Union of [`prune_view`] over several cameras.
pub fn fuse_visibility<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    cams: &[Camera],
    th: &PruneThresholds,
    settings: &RenderSettings,
) -> Result<OccupancyMask> {
    if cams.is_empty() {
        return Err(Error::invalid("visibility fusion needs at least one camera"));
    }
    let mut mask = OccupancyMask::empty(grid.resolution());
    for cam in cams {
        mask.union_with(&prune_view(grid, cam, th, settings)?)?;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orbit_cameras, Intrinsics};
    use crate::grid::Bounds;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook evaluation: explicit products for T_i, then the sums.
    fn direct_with(samples: &[RaySample], mode: DepthVariance) -> ([f64; 3], f64, f64, f64) {
        let n = samples.len();
        let alpha: Vec<f64> = samples.iter().map(|s| 1.0 - (-s.sigma * s.delta).exp()).collect();
        let trans: Vec<f64> = (0..n).map(|i| (0..i).map(|j| 1.0 - alpha[j]).product()).collect();
        let w: Vec<f64> = (0..n).map(|i| trans[i] * alpha[i]).collect();
        let a: f64 = w.iter().sum();
        let mut c = [0.0; 3];
        for i in 0..n {
            for ch in 0..3 {
                c[ch] += w[i] * samples[i].color[ch];
            }
        }
        let z: f64 = (0..n).map(|i| w[i] * samples[i].depth).sum();
        let mu = match mode {
            DepthVariance::Normalized => z / a,
            DepthVariance::Literal => z,
        };
        let var = if a > 0.0 {
            (0..n).map(|i| w[i] * (samples[i].depth - mu).powi(2)).sum::<f64>() / a
        } else {
            0.0
        };
        (c, a, z, var)
    }

    fn s(sigma: f64, delta: f64, depth: f64, color: [f64; 3]) -> RaySample {
        RaySample {
            color,
            sigma,
            delta,
            depth,
        }
    }

    #[test]
    fn empty_ray() {
        let r = composite(&[]);
        assert_eq!((r.color, r.opacity, r.depth, r.depth_var), ([0.0; 3], 0.0, 0.0, 0.0));
        assert_eq!(r.transmittance, 1.0);
    }

    #[test]
    fn opaque_single_sample() {
        let r = composite(&[s(1e6, 1.0, 2.0, [1.0, 0.0, 0.0])]);
        assert!((r.color[0] - 1.0).abs() < 1e-12 && r.color[1] == 0.0);
        assert!((r.opacity - 1.0).abs() < 1e-12);
        assert!((r.depth - 2.0).abs() < 1e-12);
        assert!(r.depth_var.abs() < 1e-12);
    }

    #[test]
    fn three_sample_example() {
        let samples = [
            s(10.0, 0.1, 1.0, [1.0, 0.0, 0.0]),
            s(0.0, 0.1, 1.1, [0.0, 1.0, 0.0]),
            s(5.0, 0.1, 1.2, [0.0, 0.0, 1.0]),
        ];
        let r = composite(&samples);
        let alpha = &r.chain.as_ref().unwrap().alpha;
        assert!((alpha[0] - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert_eq!(alpha[1], 0.0);
        assert!((alpha[2] - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        for mode in [DepthVariance::Normalized, DepthVariance::Literal] {
            let r = composite_with(&samples, mode);
            let (c, a, z, v) = direct_with(&samples, mode);
            for ch in 0..3 {
                assert!((r.color[ch] - c[ch]).abs() < 1e-14);
            }
            assert!((r.opacity - a).abs() < 1e-14);
            assert!((r.depth - z).abs() < 1e-14);
            assert!((r.depth_var - v).abs() < 1e-14);
        }
    }

    #[test]
    fn two_surface_variance() {
        // Two thin opaque-ish layers with equal weights at z = 1 and z = 2.
        let a1 = 0.5f64;
        let sigma1 = -(1.0 - a1).ln();
        let a2 = 1.0; // second layer takes the remaining half
        let samples = [s(sigma1, 1.0, 1.0, [1.0; 3]), s(1e9 * a2, 1.0, 2.0, [1.0; 3])];
        for mode in [DepthVariance::Normalized, DepthVariance::Literal] {
            let r = composite_with(&samples, mode);
            assert!((r.opacity - 1.0).abs() < 1e-12);
            assert!((r.depth - 1.5).abs() < 1e-12);
            assert!((r.depth_var - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_variance_penalizes_partial_coverage() {
        // A single thin layer of weight a at depth z.
        let a = 0.3f64;
        let samples = [s(-(1.0 - a).ln(), 1.0, 2.0, [1.0; 3])];
        let lit = composite_with(&samples, DepthVariance::Literal);
        assert!((lit.depth_var - 4.0 * (1.0 - a).powi(2)).abs() < 1e-12);
        let norm = composite_with(&samples, DepthVariance::Normalized);
        assert!(norm.depth_var.abs() < 1e-12);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<RaySample>> {
        prop::collection::vec(
            (0.0f64..20.0, 0.001f64..0.5, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
            0..40,
        )
        .prop_map(|v| {
            let mut z = 1.0;
            v.into_iter()
                .map(|(sigma, delta, r, g, b)| {
                    z += delta;
                    s(sigma, delta, z, [r, g, b])
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn composite_invariants(samples in arb_samples()) {
            let r = composite(&samples);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.opacity));
            prop_assert!((r.opacity + r.transmittance - 1.0).abs() < 1e-12);
            let mut t = 1.0;
            for a in &r.chain.as_ref().unwrap().alpha {
                let next = t * (1.0 - a);
                prop_assert!(next <= t);
                t = next;
            }
            for c in r.color {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
            }
        }

        #[test]
        fn zero_density_samples_change_nothing(samples in arb_samples(), at in 0usize..40) {
            let r = composite(&samples);
            let mut more = samples.clone();
            let k = at.min(more.len());
            let z = more.get(k).map_or(3.0, |x| x.depth);
            more.insert(k, s(0.0, 0.1, z, [0.3, 0.6, 0.9]));
            more.push(s(0.0, 0.2, 50.0, [1.0; 3]));
            let q = composite(&more);
            for c in 0..3 {
                prop_assert!((r.color[c] - q.color[c]).abs() < 1e-12);
            }
            prop_assert!((r.opacity - q.opacity).abs() < 1e-12);
            prop_assert!((r.depth - q.depth).abs() < 1e-12);
            prop_assert!((r.depth_var - q.depth_var).abs() < 1e-10);
        }

        #[test]
        fn splitting_a_sample_is_associative(samples in arb_samples(), at in 0usize..40) {
            prop_assume!(!samples.is_empty());
            let k = at % samples.len();
            let r = composite(&samples);
            let mut split = samples.clone();
            let x = split.remove(k);
            let half = RaySample { delta: x.delta / 2.0, ..x };
            split.insert(k, half);
            split.insert(k, half);
            let q = composite(&split);
            for c in 0..3 {
                prop_assert!((r.color[c] - q.color[c]).abs() < 1e-12);
            }
            prop_assert!((r.opacity - q.opacity).abs() < 1e-12);
        }

        #[test]
        fn composite_matches_direct(samples in arb_samples()) {
            for mode in [DepthVariance::Normalized, DepthVariance::Literal] {
                let r = composite_with(&samples, mode);
                let (c, a, z, v) = direct_with(&samples, mode);
                for ch in 0..3 {
                    prop_assert!((r.color[ch] - c[ch]).abs() < 1e-12);
                }
                prop_assert!((r.opacity - a).abs() < 1e-12);
                prop_assert!((r.depth - z).abs() < 1e-11);
                prop_assert!((r.depth_var - v).abs() < 1e-10 * (1.0 + v));
            }
        }
    }

    #[test]
    fn axis_ray_sample_count() {
        let g = SparseVoxelGrid::<f32>::new_dense(32, Bounds::default(), 0.0, [0.0; 3]).unwrap();
        let ray = Ray::new(Vec3::new(-3.0, 0.013, -0.021), Vec3::new(1.0, 0.0, 0.0));
        let n = sample_count(&g, &ray, &RenderSettings::default());
        assert_eq!(n as f64, 2.0 / (0.5 * g.voxel_size()));
        let r = render_ray(&g, &ray, &RenderSettings::exhaustive(), false);
        assert_eq!(r.evaluated, n);
        assert_eq!(r.opacity, 0.0);
        // The skipping path evaluates nothing on an all-zero grid.
        assert_eq!(render_ray(&g, &ray, &RenderSettings::default(), false).evaluated, 0);
    }

    fn wall_grid() -> SparseVoxelGrid<f64> {
        let mut g = SparseVoxelGrid::<f64>::new_dense(16, Bounds::default(), 0.0, [0.0; 3]).unwrap();
        for s in 0..g.len() {
            let [i, j, k] = g.lattice_coords(g.indices()[s]);
            if (6..9).contains(&k) {
                g.density_mut()[s] = 400.0;
                g.sh0_mut()[s] = [2.0, -1.0, 0.3 * i as f64 - 0.1 * j as f64];
            } else if k == 12 {
                g.density_mut()[s] = 50.0;
                g.sh0_mut()[s] = [-2.0, 2.0, 0.0];
            }
        }
        g
    }

    fn front_cam(w: u32) -> Camera {
        let intr = Intrinsics::from_fov_y(w, w, 0.6);
        Camera::new(intr, Matrix3::identity(), Vec3::new(0.0, 0.0, -3.0)).unwrap()
    }

    #[test]
    fn acceleration_is_sound_on_opaque_wall() {
        let g = wall_grid();
        let bg = Background::Constant([0.2, 0.5, 0.7]);
        let fast = render_image(&g, &front_cam(24), &bg, &RenderSettings::default()).unwrap();
        let slow = render_image(&g, &front_cam(24), &bg, &RenderSettings::exhaustive()).unwrap();
        for (a, b) in fast.color.data.iter().zip(&slow.color.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-5);
            }
        }
        assert!(fast.stats.rays_early_stopped > 0);
        assert!(fast.stats.samples_evaluated < slow.stats.samples_evaluated / 2);
    }

    #[test]
    fn empty_grid_shows_background() {
        let g = SparseVoxelGrid::<f32>::empty(16, Bounds::default()).unwrap();
        let mut bg = ColorImage::filled(8, 8, [0.0; 3]);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for p in &mut bg.data {
            *p = [r.gen(), r.gen(), r.gen()];
        }
        let out = render_image(&g, &front_cam(8), &Background::Image(bg.clone()), &RenderSettings::default()).unwrap();
        assert_eq!(out.color, bg);
        assert!(out.alpha.data.iter().all(|a| *a == 0.0));
        let wrong = Background::Image(ColorImage::filled(4, 8, [0.0; 3]));
        assert!(matches!(
            render_image(&g, &front_cam(8), &wrong, &RenderSettings::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn opaque_red_cube() {
        let g = SparseVoxelGrid::<f32>::new_dense(16, Bounds::default(), 500.0, [20.0, -20.0, -20.0]).unwrap();
        let out = render_image(&g, &front_cam(8), &Background::Constant([0.0, 1.0, 1.0]), &RenderSettings::default()).unwrap();
        for p in &out.color.data {
            assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-6 && p[2] < 1e-6);
        }
        assert!(out.alpha.data.iter().all(|a| (a - 1.0).abs() < 1e-6));
    }

    #[test]
    fn pruning_drops_occluded_wall() {
        let g = wall_grid();
        let mask = prune_view(&g, &front_cam(32), &PruneThresholds::default(), &RenderSettings::default()).unwrap();
        let mut front = 0;
        for lin in mask.iter() {
            let [_, _, k] = g.lattice_coords(lin);
            assert!(k < 12, "occluded voxel kept");
            front += (k == 6) as usize;
        }
        assert!(front > 0);
        let empty = SparseVoxelGrid::<f32>::empty(16, Bounds::default()).unwrap();
        let m = prune_view(&empty, &front_cam(8), &PruneThresholds::default(), &RenderSettings::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    fn random_grid(seed: u64) -> SparseVoxelGrid<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let vox: Vec<_> = (0..16u64.pow(3))
            .filter_map(|i| (r.gen::<f64>() < 0.2).then(|| (i, r.gen_range(-1.0..4.0), [0.0; 3])))
            .collect();
        SparseVoxelGrid::from_voxels(16, Bounds::default(), vox).unwrap()
    }

    #[test]
    fn pruning_matches_exhaustive_tagging() {
        let g = random_grid(4);
        let cam = front_cam(12);
        let th = PruneThresholds {
            tau_t: 0.0,
            tau_sigma: 0.0,
            ..Default::default()
        };
        let settings = RenderSettings::exhaustive();
        let mask = prune_view(&g, &cam, &th, &settings).unwrap();
        let mut expect = OccupancyMask::empty(16);
        let dt = 0.5 * g.voxel_size();
        for y in 0..12 {
            for x in 0..12 {
                let ray = cam.ray_for_pixel(x, y).unwrap();
                let Some(hit) = intersect_aabb(&ray, g.bounds()) else { continue };
                let mut t = hit.t_near + 0.5 * dt;
                while t < hit.t_far {
                    let p = ray.at(t);
                    if g.sample_trilinear(&p).sigma_raw > 0.0 {
                        let q = (p - g.bounds().min) / g.voxel_size();
                        let c = q.map(|v| (v.floor() as i64).clamp(0, 15) as u32);
                        let lin = g.linear_index(c.x, c.y, c.z);
                        if g.occupancy().contains(lin) {
                            expect.insert(lin);
                        }
                    }
                    t += dt;
                }
            }
        }
        assert!(expect.count() > 0);
        assert_eq!(mask, expect);
    }

    #[test]
    fn pruning_is_monotone_in_thresholds() {
        let g = random_grid(5);
        let cam = front_cam(16);
        let settings = RenderSettings::default();
        let mut prev: Option<OccupancyMask> = None;
        for (tt, ts) in [(0.0, 0.0), (1e-4, 1e-3), (1e-2, 0.5), (0.1, 2.0), (0.5, 3.5)] {
            let th = PruneThresholds {
                tau_t: tt,
                tau_sigma: ts,
                ..Default::default()
            };
            let m = prune_view(&g, &cam, &th, &settings).unwrap();
            if let Some(p) = &prev {
                assert!(m.is_subset_of(p));
            }
            prev = Some(m);
        }
    }

    #[test]
    fn stencil_attribution_covers_containing_voxel() {
        let g = random_grid(6);
        let cam = front_cam(10);
        let base = PruneThresholds::default();
        let a = prune_view(&g, &cam, &base, &RenderSettings::default()).unwrap();
        let b = prune_view(
            &g,
            &cam,
            &PruneThresholds {
                attribution: Attribution::Stencil,
                ..base
            },
            &RenderSettings::default(),
        )
        .unwrap();
        assert!(a.count() > 0);
        // A containing voxel with positive density is always one of the stencil corners.
        assert!(a.count() <= b.count());
    }

    #[test]
    fn fusion_of_one_view_is_that_view() {
        let g = random_grid(7);
        let cams = orbit_cameras(3, 3.0, 0.2, Intrinsics::from_fov_y(10, 10, 0.7)).unwrap();
        let th = PruneThresholds::default();
        let st = RenderSettings::default();
        assert_eq!(
            fuse_visibility(&g, &cams[..1], &th, &st).unwrap(),
            prune_view(&g, &cams[0], &th, &st).unwrap()
        );
        let all = fuse_visibility(&g, &cams, &th, &st).unwrap();
        for c in &cams {
            assert!(prune_view(&g, c, &th, &st).unwrap().is_subset_of(&all));
        }
        assert!(fuse_visibility(&g, &[], &th, &st).is_err());
    }

    /// A few dense blobs in an otherwise empty 32³ lattice, with faint and
    /// negative values mixed in.
    fn blob_grid(seed: u64) -> SparseVoxelGrid<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<[f64; 4]> = (0..3)
            .map(|_| [r.gen_range(4.0..28.0), r.gen_range(4.0..28.0), r.gen_range(4.0..28.0), r.gen_range(1.5..5.0)])
            .collect();
        let mut vox = Vec::new();
        for i in 0..32u64 {
            for j in 0..32u64 {
                for k in 0..32u64 {
                    let inside = centers.iter().any(|c| {
                        let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() < c[3]
                    });
                    if inside {
                        let sigma = match r.gen_range(0..4) {
                            0 => -1.0,
                            1 => 3e-11,
                            _ => r.gen_range(0.0..20.0),
                        };
                        vox.push(((i * 32 + j) * 32 + k, sigma, [r.gen_range(-2.0..2.0); 3]));
                    }
                }
            }
        }
        SparseVoxelGrid::from_voxels(32, Bounds::default(), vox).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn block_skipping_changes_nothing(seed in 0u64..1000, early in any::<bool>()) {
            let g = blob_grid(seed);
            let settings = RenderSettings { early_stop: early, ..Default::default() };
            let blocks = g.skip_blocks(settings.sigma_skip);
            prop_assert!(blocks.live_count() < blocks.block_count());
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for _ in 0..200 {
                let o = Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
                let target = Vec3::new(r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8));
                let mut d = target - o;
                if r.gen_bool(0.2) {
                    d[r.gen_range(0..3)] = 0.0;
                }
                if d.norm() == 0.0 {
                    continue;
                }
                let ray = Ray::new(o, d.normalize());
                let plain = render_ray(&g, &ray, &settings, true);
                let fast = render_ray_with(&g, Some(&blocks), &ray, &settings, true);
                prop_assert_eq!(plain, fast);
                let (mut a, mut b) = (Vec::new(), Vec::new());
                visible_along_ray(&g, None, &ray, &PruneThresholds::default(), &settings, &mut a);
                visible_along_ray(&g, Some(&blocks), &ray, &PruneThresholds::default(), &settings, &mut b);
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn skip_blocks_of_empty_and_dense_grids() {
        let e = SparseVoxelGrid::<f32>::empty(16, Bounds::default()).unwrap().skip_blocks(1e-10);
        assert_eq!((e.live_count(), e.block_count()), (0, 64));
        let d = SparseVoxelGrid::<f32>::new_dense(16, Bounds::default(), 1.0, [0.0; 3]).unwrap();
        assert_eq!(d.skip_blocks(1e-10).live_count(), 64);
        let off = SparseVoxelGrid::<f32>::new_dense(16, Bounds::default(), -1.0, [0.0; 3]).unwrap();
        assert_eq!(off.skip_blocks(1e-10).live_count(), 0);
        assert_eq!(off.skip_blocks(0.0).live_count(), 64);
    }
}
