//! Analytic scenes with known geometry, baked into grids and rendered into
//! posed datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{orbit_camera, Intrinsics};
use crate::error::{Error, Result};
use crate::grid::{logit, Bounds, SparseVoxelGrid, Vec3};
use crate::optimize::Dataset;
use crate::render::{render_image, Background, RenderSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - Vec3::from(center)).norm() - radius,
            Shape::Box { min, max } => {
                let c = (Vec3::from(min) + Vec3::from(max)) * 0.5;
                let h = (Vec3::from(max) - Vec3::from(min)) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
        }
    }

    fn center(&self) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => center.into(),
            Shape::Box { min, max } => (Vec3::from(min) + Vec3::from(max)) * 0.5,
        }
    }

    fn size(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => radius,
            Shape::Box { min, max } => 0.5 * (Vec3::from(max) - Vec3::from(min)).max(),
        }
    }

    fn within(&self, b: &Bounds) -> bool {
        let (lo, hi) = match *self {
            Shape::Sphere { center, radius } => (Vec3::from(center).add_scalar(-radius), Vec3::from(center).add_scalar(radius)),
            Shape::Box { min, max } => (min.into(), max.into()),
        };
        (0..3).all(|a| lo[a] > b.min[a] && hi[a] < b.max[a] && lo[a] < hi[a])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Linear color variation across the primitive, per unit of its size.
    pub shading: f64,
}

impl Primitive {
    fn color_at(&self, p: &Vec3) -> [f64; 3] {
        let d = (p - self.shape.center()) / self.shape.size();
        std::array::from_fn(|c| (self.color[c] + self.shading * d[c]).clamp(0.02, 0.98))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Sphere,
    TwoSpheres,
    AxisBoxes,
    Empty,
}

/// Union of primitives with a smoothstep density shell: zero outside, rising
/// to `sigma_max` at depth `softness` below the surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub kind: SceneKind,
    pub primitives: Vec<Primitive>,
    pub sigma_max: f64,
    pub softness: f64,
    pub bounds: Bounds,
}

pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl AnalyticScene {
    pub const DEFAULT_SIGMA_MAX: f64 = 60.0;
    pub const DEFAULT_SOFTNESS: f64 = 0.03;

    pub fn new(kind: SceneKind, primitives: Vec<Primitive>) -> Result<Self> {
        let s = AnalyticScene {
            kind,
            primitives,
            sigma_max: Self::DEFAULT_SIGMA_MAX,
            softness: Self::DEFAULT_SOFTNESS,
            bounds: Bounds::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        Self::new(
            SceneKind::Sphere,
            vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius,
                },
                color: [0.75, 0.45, 0.3],
                shading: 0.2,
            }],
        )
    }

    pub fn two_spheres() -> Result<Self> {
        Self::new(
            SceneKind::TwoSpheres,
            vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [-0.4, 0.1, 0.0],
                        radius: 0.35,
                    },
                    color: [0.8, 0.3, 0.3],
                    shading: 0.2,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.45, -0.1, 0.1],
                        radius: 0.3,
                    },
                    color: [0.3, 0.4, 0.8],
                    shading: 0.2,
                },
            ],
        )
    }

    pub fn axis_boxes() -> Result<Self> {
        Self::new(
            SceneKind::AxisBoxes,
            vec![
                Primitive {
                    shape: Shape::Box {
                        min: [-0.6, -0.2, -0.5],
                        max: [-0.1, 0.5, 0.1],
                    },
                    color: [0.3, 0.7, 0.4],
                    shading: 0.15,
                },
                Primitive {
                    shape: Shape::Box {
                        min: [0.1, -0.5, -0.2],
                        max: [0.6, 0.1, 0.5],
                    },
                    color: [0.8, 0.7, 0.2],
                    shading: 0.15,
                },
            ],
        )
    }

    pub fn empty() -> Self {
        AnalyticScene {
            kind: SceneKind::Empty,
            primitives: Vec::new(),
            sigma_max: Self::DEFAULT_SIGMA_MAX,
            softness: Self::DEFAULT_SOFTNESS,
            bounds: Bounds::default(),
        }
    }

    pub fn from_kind(kind: SceneKind) -> Result<Self> {
        match kind {
            SceneKind::Sphere => Self::sphere(0.5),
            SceneKind::TwoSpheres => Self::two_spheres(),
            SceneKind::AxisBoxes => Self::axis_boxes(),
            SceneKind::Empty => Ok(Self::empty()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.sigma_max > 0.0) || !self.sigma_max.is_finite() {
            return Err(Error::invalid("sigma_max must be positive"));
        }
        if !(self.softness > 0.0) {
            return Err(Error::invalid("softness must be positive"));
        }
        if let Some(i) = self.primitives.iter().position(|p| !p.shape.within(&self.bounds)) {
            return Err(Error::invalid(format!("primitive {i} is not strictly inside the bounds")));
        }
        Ok(())
    }

    /// Density and color at `p`. Overlaps take the denser primitive.
    pub fn eval(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let mut best = (0.0, [0.0; 3]);
        for prim in &self.primitives {
            let d = prim.shape.signed_distance(p);
            if d >= 0.0 {
                continue;
            }
            let s = self.sigma_max * smoothstep(-d / self.softness);
            if s > best.0 {
                best = (s, prim.color_at(p));
            }
        }
        best
    }
}

/// Samples the scene at every cell center; cells with zero density are left
/// unoccupied.
pub fn bake(scene: &AnalyticScene, resolution: u32) -> Result<SparseVoxelGrid<f32>> {
    if resolution < 8 {
        return Err(Error::invalid(format!("bake resolution must be >= 8, got {resolution}")));
    }
    scene.validate()?;
    let empty = SparseVoxelGrid::<f32>::empty(resolution, scene.bounds)?;
    let r = resolution;
    let voxels: Vec<(u64, f64, [f64; 3])> = (0..r)
        .into_par_iter()
        .flat_map_iter(|i| {
            let g = &empty;
            (0..r).flat_map(move |j| {
                (0..r).filter_map(move |k| {
                    let (s, c) = scene.eval(&g.cell_center(i, j, k));
                    (s > 0.0).then(|| (g.linear_index(i, j, k), s, c.map(logit)))
                })
            })
        })
        .collect();
    SparseVoxelGrid::from_voxels(resolution, scene.bounds, voxels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub views: usize,
    /// Image width and height.
    pub resolution: u32,
    pub background: [f64; 3],
    pub radius: f64,
    pub elevation: f64,
    /// Half-width of the uniform per-view elevation perturbation.
    pub elevation_jitter: f64,
    pub fov_y: f64,
    /// Added to every azimuth, in units of the azimuth step.
    pub azimuth_offset: f64,
    pub bake_resolution: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            views: 16,
            resolution: 128,
            background: [0.0; 3],
            radius: 2.5,
            elevation: 0.3,
            elevation_jitter: 0.25,
            fov_y: 0.9,
            azimuth_offset: 0.0,
            bake_resolution: 128,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Views halfway between the training azimuths.
    pub fn held_out(&self) -> Self {
        DatasetConfig {
            azimuth_offset: self.azimuth_offset + 0.5,
            seed: self.seed.wrapping_add(1),
            ..self.clone()
        }
    }
}

/// Renders the baked scene from orbiting viewpoints.
pub fn generate_dataset(scene: &AnalyticScene, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.views < 2 {
        return Err(Error::invalid(format!("need at least 2 views, got {}", cfg.views)));
    }
    let grid = bake(scene, cfg.bake_resolution)?;
    let intr = Intrinsics::from_fov_y(cfg.resolution, cfg.resolution, cfg.fov_y);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let step = std::f64::consts::TAU / cfg.views as f64;
    let cameras = (0..cfg.views)
        .map(|k| {
            let jitter = if cfg.elevation_jitter > 0.0 {
                rng.gen_range(-cfg.elevation_jitter..=cfg.elevation_jitter)
            } else {
                0.0
            };
            orbit_camera(step * (k as f64 + cfg.azimuth_offset), cfg.radius, cfg.elevation + jitter, intr)
        })
        .collect::<Result<Vec<_>>>()?;
    let bg = Background::Constant(cfg.background);
    let images = cameras
        .iter()
        .map(|c| render_image(&grid, c, &bg, &RenderSettings::default()).map(|o| o.color))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, cameras)
}
