//! Python bindings for voxfield.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use voxfield::camera::orbit_camera;
use voxfield::gradcheck::{run_suite, GradcheckConfig};
use voxfield::grid::{activate_density, sigmoid, Vec3};
use voxfield::optimize::{evaluate, fit as fit_grid, BackgroundModel, FitConfig, GrowthSchedule, Stage};
use voxfield::render::{composite_with, fuse_visibility, DepthVariance, PruneThresholds, RaySample};
use voxfield::synth::{bake, generate_dataset, DatasetConfig, SceneKind};
use voxfield::{io, AnalyticScene, Background, ColorImage, Intrinsics, RenderSettings, SparseVoxelGrid};

fn err(e: voxfield::Error) -> PyErr {
    match e {
        voxfield::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        voxfield::Error::Io(_)
        | voxfield::Error::GridFile(_)
        | voxfield::Error::CameraFile { .. }
        | voxfield::Error::Image { .. }
        | voxfield::Error::Json(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn scene_kind(name: &str) -> PyResult<SceneKind> {
    match name {
        "sphere" => Ok(SceneKind::Sphere),
        "two-spheres" => Ok(SceneKind::TwoSpheres),
        "axis-boxes" => Ok(SceneKind::AxisBoxes),
        "empty" => Ok(SceneKind::Empty),
        other => Err(PyValueError::new_err(format!("unknown scene {other:?}"))),
    }
}

/// Pinhole camera with a world-from-camera rotation and a center.
#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: voxfield::Camera,
}

#[pymethods]
impl PyCamera {
    /// Camera on an orbit around the origin, looking at it.
    #[staticmethod]
    #[pyo3(signature = (azimuth, radius=2.5, elevation=0.3, width=128, height=128, fov_y=0.9))]
    fn orbit(azimuth: f64, radius: f64, elevation: f64, width: u32, height: u32, fov_y: f64) -> PyResult<Self> {
        let intr = Intrinsics::from_fov_y(width, height, fov_y);
        Ok(PyCamera {
            inner: orbit_camera(azimuth, radius, elevation, intr).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCamera {
            inner: io::read_camera(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_camera(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height()
    }

    /// `(origin, direction)` of the ray through the center of pixel `(x, y)`.
    fn ray(&self, x: u32, y: u32) -> PyResult<([f64; 3], [f64; 3])> {
        let r = self.inner.ray_for_pixel(x, y).map_err(err)?;
        Ok((r.origin.into(), r.direction.into()))
    }

    fn __repr__(&self) -> String {
        format!("Camera({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Per-pixel render outputs, row-major.
#[pyclass(name = "Render", get_all)]
pub struct PyRender {
    width: u32,
    height: u32,
    /// `[r, g, b]` per pixel.
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    depth_var: Vec<f64>,
    samples_evaluated: u64,
    rays_early_stopped: u64,
    wall_ms: f64,
}

/// Sparse voxel grid with f32 storage.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
pub struct PyGrid {
    inner: SparseVoxelGrid<f32>,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    #[pyo3(signature = (resolution, sigma=0.1, sh=0.0))]
    fn dense(resolution: u32, sigma: f64, sh: f64) -> PyResult<Self> {
        Ok(PyGrid {
            inner: SparseVoxelGrid::new_dense(resolution, Default::default(), sigma, [sh; 3]).map_err(err)?,
        })
    }

    #[staticmethod]
    fn empty(resolution: u32) -> PyResult<Self> {
        Ok(PyGrid {
            inner: SparseVoxelGrid::empty(resolution, Default::default()).map_err(err)?,
        })
    }

    /// Samples an analytic scene at every cell center.
    #[staticmethod]
    #[pyo3(signature = (scene="sphere", resolution=64))]
    fn bake(scene: &str, resolution: u32) -> PyResult<Self> {
        let s = AnalyticScene::from_kind(scene_kind(scene)?).map_err(err)?;
        Ok(PyGrid {
            inner: bake(&s, resolution).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGrid {
            inner: io::read_grid(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_grid(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn resolution(&self) -> u32 {
        self.inner.resolution()
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        self.inner.sparsity()
    }

    #[getter]
    fn voxel_size(&self) -> f64 {
        self.inner.voxel_size()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Activated `(sigma, [r, g, b])` at a world position.
    fn sample(&self, x: f64, y: f64, z: f64) -> (f64, [f64; 3]) {
        let s = self.inner.sample_trilinear(&Vec3::new(x, y, z));
        (activate_density(s.sigma_raw), s.sh0.map(sigmoid))
    }

    #[pyo3(signature = (tau_sigma=1e-3, require_neighbors=true))]
    fn prune_by_density(&self, tau_sigma: f64, require_neighbors: bool) -> Self {
        PyGrid {
            inner: self.inner.prune_by_density(tau_sigma, require_neighbors),
        }
    }

    /// Keeps voxels seen from `views` orbit cameras.
    #[pyo3(signature = (views=16, resolution=128, tau_t=1e-4, tau_sigma=1e-3))]
    fn prune_by_visibility(&self, views: usize, resolution: u32, tau_t: f64, tau_sigma: f64) -> PyResult<Self> {
        let cams = voxfield::camera::orbit_cameras(views, 2.5, 0.3, Intrinsics::from_fov_y(resolution, resolution, 0.9))
            .map_err(err)?;
        let th = PruneThresholds {
            tau_t,
            tau_sigma,
            ..Default::default()
        };
        let mask = fuse_visibility(&self.inner, &cams, &th, &RenderSettings::default()).map_err(err)?;
        Ok(PyGrid {
            inner: self.inner.retain_mask(&mask).map_err(err)?,
        })
    }

    fn upsample2x(&self) -> PyResult<Self> {
        Ok(PyGrid {
            inner: self.inner.upsample2x().map_err(err)?,
        })
    }

    #[pyo3(signature = (camera, background=[0.0, 0.0, 0.0], early_stop=true))]
    fn render(&self, camera: &PyCamera, background: [f64; 3], early_stop: bool) -> PyResult<PyRender> {
        let settings = RenderSettings {
            early_stop,
            ..Default::default()
        };
        let out = voxfield::render_image(&self.inner, &camera.inner, &Background::Constant(background), &settings)
            .map_err(err)?;
        Ok(PyRender {
            width: out.color.width,
            height: out.color.height,
            color: out.color.data,
            alpha: out.alpha.data,
            depth: out.depth.data,
            depth_var: out.depth_var.data,
            samples_evaluated: out.stats.samples_evaluated,
            rays_early_stopped: out.stats.rays_early_stopped,
            wall_ms: out.stats.wall_ms,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(resolution={}, voxels={}, sparsity={:.4})",
            self.inner.resolution(),
            self.inner.len(),
            self.inner.sparsity()
        )
    }
}

/// Composites `(sigma, delta, depth, [r, g, b])` samples front to back.
/// Returns `(color, alpha, depth, depth_var)`.
#[pyfunction]
#[pyo3(signature = (samples, literal_variance=false))]
fn composite(samples: Vec<(f64, f64, f64, [f64; 3])>, literal_variance: bool) -> ([f64; 3], f64, f64, f64) {
    let s: Vec<RaySample> = samples
        .into_iter()
        .map(|(sigma, delta, depth, color)| RaySample {
            color,
            sigma,
            delta,
            depth,
        })
        .collect();
    let mode = if literal_variance {
        DepthVariance::Literal
    } else {
        DepthVariance::Normalized
    };
    let r = composite_with(&s, mode);
    (r.color, r.opacity, r.depth, r.depth_var)
}

/// Writes an analytic-scene dataset directory.
#[pyfunction]
#[pyo3(signature = (out_dir, scene="sphere", views=16, resolution=128, seed=0, held_out=false))]
fn synth_dataset(out_dir: PathBuf, scene: &str, views: usize, resolution: u32, seed: u64, held_out: bool) -> PyResult<usize> {
    let s = AnalyticScene::from_kind(scene_kind(scene)?).map_err(err)?;
    let mut cfg = DatasetConfig {
        views,
        resolution,
        seed,
        ..Default::default()
    };
    if held_out {
        cfg = cfg.held_out();
    }
    let data = generate_dataset(&s, &cfg).map_err(err)?;
    io::write_dataset(&out_dir, &io::SceneFile { scene: s, config: cfg }, &data).map_err(err)?;
    Ok(data.len())
}

/// Fits a grid to a dataset directory. Returns `(grid, mse per iteration)`.
#[pyfunction]
#[pyo3(signature = (data_dir, grid_res=vec![32, 64], iters=vec![2000, 2000], image_res=64, lambda_dv=0.01,
                    lr_sigma=0.1, lr_sh=0.01, seed=0, background="image"))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data_dir: PathBuf,
    grid_res: Vec<u32>,
    iters: Vec<u32>,
    image_res: u32,
    lambda_dv: f64,
    lr_sigma: f64,
    lr_sh: f64,
    seed: u64,
    background: &str,
) -> PyResult<(PyGrid, Vec<f64>)> {
    if grid_res.len() != iters.len() {
        return Err(PyValueError::new_err("grid_res and iters must have the same length"));
    }
    let data = io::read_dataset(&data_dir).map_err(err)?;
    let mut config = FitConfig::new(GrowthSchedule {
        stages: grid_res
            .iter()
            .zip(&iters)
            .map(|(&g, &n)| Stage {
                grid_res: g,
                image_res,
                iterations: n,
            })
            .collect(),
        prune_tau_sigma: GrowthSchedule::DEFAULT_PRUNE_TAU,
    });
    config.reg.lambda_dv = lambda_dv;
    config.reg.eta_fg = voxfield::RegConfig::ETA_FG_SPARSE;
    config.lr_sigma = lr_sigma;
    config.lr_sh = lr_sh;
    config.seed = seed;
    config.background = match background {
        "image" => BackgroundModel::Image,
        "uniform" => BackgroundModel::Uniform,
        other => return Err(PyValueError::new_err(format!("unknown background model {other:?}"))),
    };
    let result = py
        .detach(|| fit_grid(&data, &config, &mut |_| Ok(())))
        .map_err(err)?;
    Ok((
        PyGrid { inner: result.grid },
        result.log.iter().map(|r| r.mse).collect(),
    ))
}

/// Mean mse of `grid` over black against every view in a dataset directory.
#[pyfunction]
fn dataset_mse(grid: &PyGrid, data_dir: PathBuf) -> PyResult<f64> {
    let data = io::read_dataset(&data_dir).map_err(err)?;
    let (w, h) = data.size();
    evaluate(&grid.inner, &ColorImage::filled(w, h, [0.0; 3]), &data, &RenderSettings::default()).map_err(err)
}

/// Runs the finite-difference suite; returns `(passed, {term: max_rel_err})`.
#[pyfunction]
#[pyo3(signature = (seeds=20))]
fn gradcheck(py: Python<'_>, seeds: u64) -> PyResult<(bool, Vec<(String, f64)>)> {
    let cfg = GradcheckConfig {
        seeds,
        ..Default::default()
    };
    let rep = py.detach(|| run_suite(&cfg)).map_err(err)?;
    let worst = rep
        .worst_by_term()
        .into_iter()
        .map(|(t, e, _)| (t.name().to_string(), e))
        .collect();
    Ok((rep.passed(), worst))
}

#[pymodule]
fn pyvoxfield(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyRender>()?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_mse, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
