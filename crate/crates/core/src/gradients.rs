//! Analytic adjoints of compositing, interpolation and activations.
//!
//! For per-sample weights `w_k = T_k α_k` and any per-sample quantity `C_k`,
//!
//! ```text
//! Σ_k (∂w_k/∂σ_i) C_k = δ_i [ T_i C_i − Σ_{k≥i} w_k C_k ]
//! ```
//!
//! Every ray output (color, coverage, expected depth and depth variance) is a
//! function of the weights, so the density adjoint of a sample is this
//! expression with `C_k = ∂L/∂w_k` collected from all outputs.

use crate::error::{Error, Result};
use crate::grid::{Scalar, SparseVoxelGrid, Vec3, EMPTY_SLOT};
use crate::render::{DepthVariance, RayComposite};

/// Upstream derivatives of a loss with respect to one ray's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayUpstream {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub depth_var: f64,
}

impl RayUpstream {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3] && self.opacity == 0.0 && self.depth == 0.0 && self.depth_var == 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleGrad {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// `∂L/∂w_k` for every sample, given the upstream ray derivatives.
fn weight_adjoints(ray: &RayComposite, up: &RayUpstream) -> impl Fn(&crate::render::RaySample) -> f64 {
    let a = ray.opacity;
    let zhat = ray.depth;
    let (center, g_depth, var_scale, var_shift) = if a > 0.0 {
        match ray.variance_mode {
            // Var = Σ w (z − μ)²/a with μ = ẑ/a:
            // ∂Var/∂w_k = ((z_k − μ)² − Var)/a.
            DepthVariance::Normalized => (
                zhat / a,
                up.depth,
                up.depth_var / a,
                -up.depth_var * ray.depth_var / a,
            ),
            // Var = S/a with S = Σ w (z − ẑ)²; ∂S/∂ẑ = −2ẑ(1 − a).
            DepthVariance::Literal => {
                let s = ray.depth_var * a;
                (
                    zhat,
                    up.depth + up.depth_var * (-2.0 * zhat * (1.0 - a) / a),
                    up.depth_var / a,
                    -up.depth_var * s / (a * a),
                )
            }
        }
    } else {
        (zhat, up.depth, 0.0, 0.0)
    };
    let g = *up;
    move |s| {
        let dz = s.depth - center;
        g.color[0] * s.color[0]
            + g.color[1] * s.color[1]
            + g.color[2] * s.color[2]
            + g.opacity
            + g_depth * s.depth
            + var_scale * dz * dz
            + var_shift
    }
}

/// Per-sample adjoints `(∂L/∂σ_i, ∂L/∂c_i)` of a composited ray.
///
/// Transmittance is recomputed from the stored `α_i` in a forward sweep and
/// the suffix sums are formed as `total − prefix`.
pub fn backprop_ray(ray: &RayComposite, up: &RayUpstream) -> Result<Vec<SampleGrad>> {
    let chain = ray
        .chain
        .as_ref()
        .ok_or_else(|| Error::InvalidState("ray was rendered without retaining its sample chain".into()))?;
    let n = chain.samples.len();
    if up.is_zero() {
        return Ok(vec![SampleGrad::default(); n]);
    }
    let dl_dw = weight_adjoints(ray, up);

    let mut total = 0.0;
    let mut t = 1.0;
    for (s, &alpha) in chain.samples.iter().zip(&chain.alpha) {
        total += t * alpha * dl_dw(s);
        t *= 1.0 - alpha;
    }

    let mut out = Vec::with_capacity(n);
    let mut prefix = 0.0;
    let mut t = 1.0;
    for (s, &alpha) in chain.samples.iter().zip(&chain.alpha) {
        let c = dl_dw(s);
        let w = t * alpha;
        let suffix = total - prefix;
        out.push(SampleGrad {
            sigma: s.delta * (t * c - suffix),
            color: up.color.map(|g| g * w),
        });
        prefix += w * c;
        t *= 1.0 - alpha;
    }
    Ok(out)
}

/// Accumulated `∂L/∂σ_raw` and `∂L/∂sh0` per occupied voxel, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub sigma: Vec<f64>,
    pub sh0: Vec<[f64; 3]>,
}

impl GradientBuffer {
    pub fn for_grid<T: Scalar>(grid: &SparseVoxelGrid<T>) -> Self {
        GradientBuffer {
            sigma: vec![0.0; grid.len()],
            sh0: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn zero(&mut self) {
        self.sigma.iter_mut().for_each(|v| *v = 0.0);
        self.sh0.iter_mut().for_each(|v| *v = [0.0; 3]);
    }

    pub fn merge(&mut self, other: &GradientBuffer) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid("gradient buffers index different grids"));
        }
        for (a, b) in self.sigma.iter_mut().zip(&other.sigma) {
            *a += b;
        }
        for (a, b) in self.sh0.iter_mut().zip(&other.sh0) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.sigma.iter_mut().for_each(|v| *v *= k);
        self.sh0.iter_mut().for_each(|v| *v = v.map(|x| x * k));
    }

    /// First non-finite entry, as `(slot, what)`.
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        if let Some(i) = self.sigma.iter().position(|v| !v.is_finite()) {
            return Some((i, "density"));
        }
        self.sh0
            .iter()
            .position(|v| v.iter().any(|x| !x.is_finite()))
            .map(|i| (i, "color"))
    }
}

/// Distributes one sample's adjoint to its occupied trilinear neighbors
/// through the activations. `sigma` and `color` are the activated values of
/// the sample; `σ > 0` iff the interpolated pre-activation was positive.
pub fn scatter_adjoint<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    buffer: &mut GradientBuffer,
    position: &Vec3,
    sigma: f64,
    color: [f64; 3],
    grad: &SampleGrad,
) {
    let Some(st) = grid.stencil(position) else { return };
    let d_sigma = if sigma > 0.0 { grad.sigma } else { 0.0 };
    let d_sh = [
        grad.color[0] * color[0] * (1.0 - color[0]),
        grad.color[1] * color[1] * (1.0 - color[1]),
        grad.color[2] * color[2] * (1.0 - color[2]),
    ];
    for c in 0..8 {
        let slot = st.slots[c];
        if slot == EMPTY_SLOT {
            continue;
        }
        let w = st.weights[c];
        let s = slot as usize;
        buffer.sigma[s] += w * d_sigma;
        for ch in 0..3 {
            buffer.sh0[s][ch] += w * d_sh[ch];
        }
    }
}

/// Backpropagates a grid-rendered ray all the way into `buffer`.
pub fn backprop_into_grid<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    buffer: &mut GradientBuffer,
    ray: &RayComposite,
    up: &RayUpstream,
) -> Result<()> {
    if up.is_zero() {
        return Ok(());
    }
    let grads = backprop_ray(ray, up)?;
    let chain = ray.chain.as_ref().expect("checked by backprop_ray");
    if chain.positions.len() != chain.samples.len() {
        return Err(Error::InvalidState("sample chain has no positions".into()));
    }
    for ((g, s), p) in grads.iter().zip(&chain.samples).zip(&chain.positions) {
        scatter_adjoint(grid, buffer, p, s.sigma, s.color, g);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter index with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[k]` with the central difference `(f(x+h) − f(x−h))/2h`
/// for every `k` in `subset`.
pub fn fd_check<F>(mut f: F, x0: &[f64], analytic: &[f64], subset: &[usize], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if analytic.len() != x0.len() {
        return Err(Error::invalid("analytic gradient length differs from parameter count"));
    }
    let mut x = x0.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: subset.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &k in subset {
        if k >= x.len() {
            return Err(Error::invalid(format!("parameter {k} out of range")));
        }
        x[k] = x0[k] + h;
        let fp = f(&x);
        x[k] = x0[k] - h;
        let fm = f(&x);
        x[k] = x0[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite function value while perturbing parameter {k}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[k], numeric);
        if report.checked == 0 || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Flattened parameter view of a grid: all densities, then sh0 triples.
pub fn grid_params<T: Scalar>(grid: &SparseVoxelGrid<T>) -> Vec<f64> {
    let mut v: Vec<f64> = grid.density().iter().map(|x| x.to_f64()).collect();
    for sh in grid.sh0() {
        v.extend(sh.iter().map(|x| x.to_f64()));
    }
    v
}

pub fn set_grid_params<T: Scalar>(grid: &mut SparseVoxelGrid<T>, params: &[f64]) {
    let n = grid.len();
    for (d, p) in grid.density_mut().iter_mut().zip(&params[..n]) {
        *d = T::from_f64(*p);
    }
    for (s, p) in grid.sh0_mut().iter_mut().zip(params[n..].chunks_exact(3)) {
        *s = [T::from_f64(p[0]), T::from_f64(p[1]), T::from_f64(p[2])];
    }
}

/// Gradient buffer in the layout of [`grid_params`].
pub fn flatten_gradient(buffer: &GradientBuffer) -> Vec<f64> {
    let mut v = buffer.sigma.clone();
    for sh in &buffer.sh0 {
        v.extend_from_slice(sh);
    }
    v
}
