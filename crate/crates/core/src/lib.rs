//! Sparse voxel radiance fields: storage, differentiable rendering,
//! regularizers, fitting and file formats.

pub mod camera;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod grid;
pub mod io;
pub mod losses;
pub mod optimize;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod synth;

pub use camera::{Camera, Intrinsics, Ray};
pub use error::{Error, Result};
pub use gradients::GradientBuffer;
pub use grid::{Bounds, OccupancyMask, SparseVoxelGrid};
pub use losses::{LossReport, RegConfig};
pub use optimize::{fit, Dataset, FitConfig, GrowthSchedule};
pub use raster::{ColorImage, ScalarImage};
pub use render::{render_image, Background, RenderOutput, RenderSettings};
pub use synth::AnalyticScene;
