//! Adam and the coarse-to-fine fitting loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gradients::GradientBuffer;
use crate::grid::{Bounds, Scalar, SparseVoxelGrid};
use crate::losses::{self, LossReport, RegConfig};
use crate::pipeline::{view_objective, GradTarget};
use crate::raster::ColorImage;
use crate::render::RenderSettings;

/// Bias-corrected Adam over one flat parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub key: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(key: impl Into<String>, lr: f64, len: usize) -> Self {
        Adam {
            key: key.into(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Nothing is modified when a gradient is not finite.
    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::invalid(format!(
                "{}: {} params, {} grads, state for {}",
                self.key,
                params.len(),
                grads.len(),
                self.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.step,
                what: format!("{}[{i}] gradient", self.key),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].to_f64() - self.lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = T::from_f64(p);
        }
        Ok(())
    }
}

/// Posed training images. All images share one size.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ColorImage>,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    pub fn new(images: Vec<ColorImage>, cameras: Vec<Camera>) -> Result<Self> {
        if images.len() != cameras.len() {
            return Err(Error::invalid(format!(
                "{} images but {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        if let Some(first) = images.first() {
            for (i, (img, cam)) in images.iter().zip(&cameras).enumerate() {
                if !img.same_size(first) {
                    return Err(Error::invalid(format!("image {i} differs in size from image 0")));
                }
                if (cam.width(), cam.height()) != (img.width, img.height) {
                    return Err(Error::invalid(format!(
                        "camera {i} renders {}x{} but image is {}x{}",
                        cam.width(),
                        cam.height(),
                        img.width,
                        img.height
                    )));
                }
            }
        }
        Ok(Dataset { images, cameras })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> (u32, u32) {
        self.images.first().map_or((0, 0), |i| (i.width, i.height))
    }

    /// Box-filtered copy whose width is `width`.
    pub fn at_width(&self, width: u32) -> Result<Dataset> {
        let (w, h) = self.size();
        if width == 0 || w % width != 0 {
            return Err(Error::invalid(format!("image width {w} is not a multiple of {width}")));
        }
        let f = w / width;
        if h % f != 0 {
            return Err(Error::invalid(format!("image height {h} is not divisible by {f}")));
        }
        let images = self.images.iter().map(|i| i.downsample(f)).collect::<Result<Vec<_>>>()?;
        let cameras = self
            .cameras
            .iter()
            .map(|c| c.with_resolution(w / f, h / f))
            .collect();
        Ok(Dataset { images, cameras })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub grid_res: u32,
    /// Width of the rendered images during this stage.
    pub image_res: u32,
    pub iterations: u32,
}

/// Ordered fitting stages. Between stages with different grid resolutions
/// the grid is pruned with `prune_by_density(prune_tau_sigma, true)` and then
/// doubled until it reaches the next resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub stages: Vec<Stage>,
    pub prune_tau_sigma: f64,
}

impl GrowthSchedule {
    pub const DEFAULT_PRUNE_TAU: f64 = 1e-3;

    pub fn single(grid_res: u32, image_res: u32, iterations: u32) -> Self {
        GrowthSchedule {
            stages: vec![Stage {
                grid_res,
                image_res,
                iterations,
            }],
            prune_tau_sigma: Self::DEFAULT_PRUNE_TAU,
        }
    }

    /// One stage per grid resolution; the image width follows the grid
    /// resolution, capped at `max_image_res`.
    pub fn progressive(grid_res: &[u32], iterations: &[u32], max_image_res: u32) -> Result<Self> {
        if grid_res.len() != iterations.len() {
            return Err(Error::invalid("need one iteration budget per grid resolution"));
        }
        let s = GrowthSchedule {
            stages: grid_res
                .iter()
                .zip(iterations)
                .map(|(&g, &n)| Stage {
                    grid_res: g,
                    image_res: g.min(max_image_res),
                    iterations: n,
                })
                .collect(),
            prune_tau_sigma: Self::DEFAULT_PRUNE_TAU,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("schedule has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.iterations == 0 {
                return Err(Error::invalid(format!("stage {i} has no iterations")));
            }
            if s.grid_res == 0 || s.image_res == 0 {
                return Err(Error::invalid(format!("stage {i} has a zero resolution")));
            }
        }
        for w in self.stages.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.grid_res < a.grid_res || b.image_res < a.image_res {
                return Err(Error::invalid("stage resolutions must be non-decreasing"));
            }
            if b.grid_res % a.grid_res != 0 || !(b.grid_res / a.grid_res).is_power_of_two() {
                return Err(Error::invalid(format!(
                    "grid resolution {} is not a power-of-two multiple of {}",
                    b.grid_res, a.grid_res
                )));
            }
        }
        if !(self.prune_tau_sigma >= 0.0) {
            return Err(Error::invalid("prune threshold must be >= 0"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.stages.iter().map(|s| s.iterations as u64).sum()
    }
}

/// How the background behind the grid is modelled during fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundModel {
    /// One learned RGB value per pixel, shared by all views.
    Image,
    /// One learned RGB value for the whole image.
    Uniform,
    /// A known constant color.
    Fixed([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub schedule: GrowthSchedule,
    pub reg: RegConfig,
    pub lr_sigma: f64,
    pub lr_sh: f64,
    pub lr_background: f64,
    pub seed: u64,
    pub bounds: Bounds,
    pub init_sigma: f64,
    pub init_sh: f64,
    pub init_background: [f64; 3],
    pub background: BackgroundModel,
    pub views_per_iter: usize,
    #[serde(skip)]
    pub render: RenderSettings,
    /// Emit a checkpoint event every this many iterations.
    pub checkpoint_every: Option<u64>,
    /// Include `wall_ms` in log records. Off by default so logs of identical
    /// runs compare equal byte for byte.
    pub log_wall_time: bool,
}

impl FitConfig {
    pub fn new(schedule: GrowthSchedule) -> Self {
        FitConfig {
            schedule,
            reg: RegConfig::default(),
            lr_sigma: 0.1,
            lr_sh: 0.01,
            lr_background: 0.01,
            seed: 0,
            bounds: Bounds::default(),
            init_sigma: 0.1,
            init_sh: 0.0,
            init_background: [0.5; 3],
            background: BackgroundModel::Image,
            views_per_iter: 1,
            render: RenderSettings::default(),
            checkpoint_every: None,
            log_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.reg.validate()?;
        self.render.validate()?;
        self.bounds.validate()?;
        for (name, lr) in [
            ("lr_sigma", self.lr_sigma),
            ("lr_sh", self.lr_sh),
            ("lr_background", self.lr_background),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.views_per_iter == 0 {
            return Err(Error::invalid("views_per_iter must be >= 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint interval must be >= 1"));
        }
        Ok(())
    }
}

/// One line of the fit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub stage: usize,
    pub mse: f64,
    pub psnr: f64,
    pub l_dv: f64,
    pub l_tv: f64,
    pub l_cvg_fg: f64,
    pub l_cvg_bg: f64,
    pub sparsity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

pub enum FitEvent<'a> {
    Iteration(&'a LogRecord),
    Checkpoint {
        iter: u64,
        grid: &'a SparseVoxelGrid<f32>,
        background: &'a ColorImage,
    },
    /// Structural change between stages.
    Grown {
        stage: usize,
        pruned_to: usize,
        grid: &'a SparseVoxelGrid<f32>,
    },
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub grid: SparseVoxelGrid<f32>,
    pub background: ColorImage,
    pub log: Vec<LogRecord>,
}

/// Nearest-neighbor resize by an integer factor.
pub fn resize_background(bg: &ColorImage, w: u32, h: u32) -> Result<ColorImage> {
    if bg.width == w && bg.height == h {
        Ok(bg.clone())
    } else if w % bg.width == 0 && w / bg.width == h / bg.height && h % bg.height == 0 {
        Ok(bg.upsample_nearest(w / bg.width))
    } else {
        Err(Error::invalid(format!(
            "cannot resize background {}x{} to {w}x{h}",
            bg.width, bg.height
        )))
    }
}

/// Optimizer state for one stage: the grid and background being fitted,
/// their Adam moments and the view order.
pub struct Trainer {
    grid: SparseVoxelGrid<f32>,
    background: ColorImage,
    model: BackgroundModel,
    adam_sigma: Adam,
    adam_sh: Adam,
    adam_bg: Adam,
    gbuf: GradientBuffer,
    gbg: Vec<[f64; 3]>,
    order: Vec<usize>,
}

impl Trainer {
    /// Fresh Adam state for `grid`; `background` must match the view size.
    pub fn new(grid: SparseVoxelGrid<f32>, background: ColorImage, config: &FitConfig) -> Self {
        let n = grid.len();
        let bg_params = match config.background {
            BackgroundModel::Image => 3 * background.data.len(),
            BackgroundModel::Uniform => 3,
            BackgroundModel::Fixed(_) => 0,
        };
        Trainer {
            adam_sigma: Adam::new("density", config.lr_sigma, n),
            adam_sh: Adam::new("color", config.lr_sh, 3 * n),
            adam_bg: Adam::new("background", config.lr_background, bg_params),
            gbuf: GradientBuffer::for_grid(&grid),
            gbg: vec![[0.0; 3]; background.data.len()],
            order: Vec::new(),
            model: config.background,
            grid,
            background,
        }
    }

    pub fn grid(&self) -> &SparseVoxelGrid<f32> {
        &self.grid
    }

    pub fn background(&self) -> &ColorImage {
        &self.background
    }

    pub fn into_parts(self) -> (SparseVoxelGrid<f32>, ColorImage) {
        (self.grid, self.background)
    }

    /// One iteration: `views_per_iter` views drawn without replacement from a
    /// reshuffled order, loss and gradients, TV, then one Adam step per
    /// parameter group. `iter` only labels errors.
    pub fn step(&mut self, views: &Dataset, config: &FitConfig, rng: &mut ChaCha8Rng, iter: u64) -> Result<LossReport> {
        if views.is_empty() {
            return Err(Error::invalid("no views to fit"));
        }
        self.gbuf.zero();
        self.gbg.iter_mut().for_each(|g| *g = [0.0; 3]);
        let batch = config.views_per_iter.min(views.len());
        let weight = 1.0 / batch as f64;
        let mut acc = [0.0; 4];
        for _ in 0..batch {
            if self.order.is_empty() {
                self.order = (0..views.len()).collect();
                self.order.shuffle(rng);
            }
            let v = self.order.pop().expect("refilled above");
            let (rep, _) = view_objective(
                &self.grid,
                &views.cameras[v],
                &views.images[v],
                &self.background,
                &config.reg,
                &config.render,
                Some(GradTarget {
                    grid: &mut self.gbuf,
                    background: &mut self.gbg,
                    weight,
                }),
            )?;
            acc[0] += weight * rep.mse;
            acc[1] += weight * rep.l_dv;
            acc[2] += weight * rep.l_cvg_fg;
            acc[3] += weight * rep.l_cvg_bg;
        }
        let l_tv = losses::l_tv(&self.grid, config.reg.lambda_tv, config.reg.tv_mode, rng, Some(&mut self.gbuf));
        let report = LossReport::new(acc[0], acc[1], l_tv, acc[2], acc[3]);

        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter,
                what: "loss".into(),
            });
        }
        if let Some((slot, what)) = self.gbuf.find_non_finite() {
            return Err(Error::NonFinite {
                iteration: iter,
                what: format!("{what} gradient of voxel {}", self.grid.indices()[slot]),
            });
        }
        let with_iter = |e: Error| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { iteration: iter, what },
            other => other,
        };
        self.adam_sigma
            .step(self.grid.density_mut(), &self.gbuf.sigma)
            .map_err(with_iter)?;
        self.adam_sh
            .step(self.grid.sh0_mut().as_flattened_mut(), self.gbuf.sh0.as_flattened())
            .map_err(with_iter)?;
        match self.model {
            BackgroundModel::Image => {
                self.adam_bg
                    .step(self.background.data.as_flattened_mut(), self.gbg.as_flattened())
                    .map_err(with_iter)?;
            }
            BackgroundModel::Uniform => {
                let mut g = [0.0; 3];
                for p in &self.gbg {
                    for c in 0..3 {
                        g[c] += p[c];
                    }
                }
                let mut v = self.background.data[0];
                self.adam_bg.step(&mut v, &g).map_err(with_iter)?;
                self.background.data.iter_mut().for_each(|p| *p = v);
            }
            BackgroundModel::Fixed(_) => {}
        }
        for p in &mut self.background.data {
            *p = p.map(|c| c.clamp(0.0, 1.0));
        }
        Ok(report)
    }
}

/// Fits a grid and a background image to `dataset`.
///
/// Each iteration renders `views_per_iter` full views, evaluates
/// `mse + L_reg`, backpropagates and takes one Adam step on densities,
/// colors and the background. Adam state is reset at stage boundaries.
/// `observer` sees every log record and checkpoint; an error from it stops
/// the fit. A non-finite loss or gradient aborts with [`Error::NonFinite`];
/// the last checkpoint handed to the observer is then the latest good state.
pub fn fit(
    dataset: &Dataset,
    config: &FitConfig,
    observer: &mut dyn FnMut(FitEvent<'_>) -> Result<()>,
) -> Result<FitResult> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 views, got {}", dataset.len())));
    }
    let stages = &config.schedule.stages;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grid = SparseVoxelGrid::<f32>::new_dense(
        stages[0].grid_res,
        config.bounds,
        config.init_sigma,
        [config.init_sh; 3],
    )?;
    let mut background: Option<ColorImage> = None;
    let mut log = Vec::with_capacity(config.schedule.total_iterations() as usize);
    let mut iter = 0u64;

    for (si, stage) in stages.iter().enumerate() {
        if grid.resolution() != stage.grid_res {
            grid = grid.prune_by_density(config.schedule.prune_tau_sigma, true);
            let pruned_to = grid.len();
            while grid.resolution() < stage.grid_res {
                grid = grid.upsample2x()?;
            }
            observer(FitEvent::Grown {
                stage: si,
                pruned_to,
                grid: &grid,
            })?;
        }
        let views = dataset.at_width(stage.image_res)?;
        let (w, h) = views.size();
        let bg = match (&background, config.background) {
            (_, BackgroundModel::Fixed(c)) => ColorImage::filled(w, h, c),
            (None, _) => ColorImage::filled(w, h, config.init_background),
            (Some(b), _) => resize_background(b, w, h)?,
        };
        let mut trainer = Trainer::new(grid, bg, config);

        for _ in 0..stage.iterations {
            let start = Instant::now();
            let report = trainer.step(&views, config, &mut rng, iter)?;
            iter += 1;
            let record = LogRecord {
                iter,
                stage: si,
                mse: report.mse,
                psnr: report.psnr(),
                l_dv: report.l_dv,
                l_tv: report.l_tv,
                l_cvg_fg: report.l_cvg_fg,
                l_cvg_bg: report.l_cvg_bg,
                sparsity: trainer.grid().sparsity(),
                wall_ms: config
                    .log_wall_time
                    .then(|| start.elapsed().as_secs_f64() * 1e3),
            };
            observer(FitEvent::Iteration(&record))?;
            log.push(record);
            if config.checkpoint_every.is_some_and(|k| iter % k == 0) {
                observer(FitEvent::Checkpoint {
                    iter,
                    grid: trainer.grid(),
                    background: trainer.background(),
                })?;
            }
        }
        let (g, b) = trainer.into_parts();
        grid = g;
        background = Some(b);
    }
    Ok(FitResult {
        grid,
        background: background.expect("at least one stage ran"),
        log,
    })
}

/// Mean squared error of renders of `grid` over `background` against every
/// view of `dataset`.
pub fn evaluate<T: Scalar>(
    grid: &SparseVoxelGrid<T>,
    background: &ColorImage,
    dataset: &Dataset,
    settings: &RenderSettings,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let (w, h) = dataset.size();
    let bg = crate::render::Background::Image(resize_background(background, w, h)?);
    let mut sum = 0.0;
    for (img, cam) in dataset.images.iter().zip(&dataset.cameras) {
        let out = crate::render::render_image(grid, cam, &bg, settings)?;
        sum += losses::mse(&out.color, img)?;
    }
    Ok(sum / dataset.len() as f64)
}
