//! Grid files, camera JSON, PNG images and dataset directories.
//!
//! Grid file layout (little-endian):
//!
//! ```text
//! "VXGF" | version u16 = 1 | R u32 | bounds 6×f64 (min xyz, max xyz) | count u64
//! count × { index u64, σ_raw f32, sh0 3×f32 }   indices strictly ascending
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::grid::{Bounds, Scalar, SparseVoxelGrid, Vec3, MAX_RESOLUTION};
use crate::optimize::Dataset;
use crate::raster::{ColorImage, ScalarImage};
use crate::synth::{AnalyticScene, DatasetConfig};

pub const MAGIC: [u8; 4] = *b"VXGF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 4 + 48 + 8;
pub const RECORD_LEN: u64 = 8 + 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridFileError {
    #[error("bad magic {found:?} at byte 0")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported version {found} at byte 4 (expected {VERSION})")]
    BadVersion { found: u16 },

    #[error("bad header at byte {offset}: {message}")]
    BadHeader { offset: u64, message: String },

    #[error("truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing bytes: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("index order violated at record {record} (byte {offset}): {index} does not exceed {previous}")]
    Ordering {
        record: u64,
        offset: u64,
        previous: u64,
        index: u64,
    },

    #[error("index {index} at byte {offset} is outside a {resolution}^3 lattice")]
    IndexOutOfRange { offset: u64, index: u64, resolution: u32 },
}

/// Serializes a grid; values are stored as f32.
pub fn grid_to_bytes<T: Scalar>(grid: &SparseVoxelGrid<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity((HEADER_LEN + RECORD_LEN * grid.len() as u64) as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&grid.resolution().to_le_bytes());
    for v in grid.bounds().to_array() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(grid.len() as u64).to_le_bytes());
    for s in 0..grid.len() {
        out.extend_from_slice(&grid.indices()[s].to_le_bytes());
        out.extend_from_slice(&(grid.density()[s].to_f64() as f32).to_le_bytes());
        for c in grid.sh0()[s] {
            out.extend_from_slice(&(c.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let a: [u8; N] = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        a
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

pub fn grid_from_bytes(bytes: &[u8]) -> std::result::Result<SparseVoxelGrid<f32>, GridFileError> {
    let actual = bytes.len() as u64;
    if actual < 4 || bytes[..4] != MAGIC {
        return Err(GridFileError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if actual < HEADER_LEN {
        if actual >= 6 {
            let found = u16::from_le_bytes([bytes[4], bytes[5]]);
            if found != VERSION {
                return Err(GridFileError::BadVersion { found });
            }
        }
        return Err(GridFileError::Truncated {
            expected: HEADER_LEN,
            actual,
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take());
    if version != VERSION {
        return Err(GridFileError::BadVersion { found: version });
    }
    let resolution = u32::from_le_bytes(r.take());
    if resolution < 8 || resolution > MAX_RESOLUTION || !resolution.is_power_of_two() {
        return Err(GridFileError::BadHeader {
            offset: 6,
            message: format!("resolution {resolution} is not a power of two in 8..={MAX_RESOLUTION}"),
        });
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = f64::from_le_bytes(r.take());
    }
    let bounds = Bounds::from_array(b).map_err(|e| GridFileError::BadHeader {
        offset: 10,
        message: e.to_string(),
    })?;
    let count = r.u64();
    let expected = count
        .checked_mul(RECORD_LEN)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| GridFileError::BadHeader {
            offset: 58,
            message: format!("voxel count {count} overflows"),
        })?;
    if actual < expected {
        return Err(GridFileError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(GridFileError::TrailingBytes { expected, actual });
    }
    let cells = (resolution as u64).pow(3);
    let mut indices = Vec::with_capacity(count as usize);
    let mut density = Vec::with_capacity(count as usize);
    let mut sh0 = Vec::with_capacity(count as usize);
    for rec in 0..count {
        let offset = r.pos as u64;
        let index = r.u64();
        if index >= cells {
            return Err(GridFileError::IndexOutOfRange {
                offset,
                index,
                resolution,
            });
        }
        if let Some(&previous) = indices.last() {
            if index <= previous {
                return Err(GridFileError::Ordering {
                    record: rec,
                    offset,
                    previous,
                    index,
                });
            }
        }
        indices.push(index);
        density.push(r.f32());
        sh0.push([r.f32(), r.f32(), r.f32()]);
    }
    SparseVoxelGrid::from_sorted_parts(resolution, bounds, indices, density, sh0).map_err(|e| GridFileError::BadHeader {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_grid<T: Scalar>(path: &Path, grid: &SparseVoxelGrid<T>) -> Result<()> {
    fs::write(path, grid_to_bytes(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<SparseVoxelGrid<f32>> {
    let bytes = fs::read(path)?;
    Ok(grid_from_bytes(&bytes)?)
}

/// On-disk camera: `R` is the world-from-camera rotation in row-major order
/// and `t` the camera center in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

pub const CAMERA_ORTHO_TOL: f64 = 1e-4;

impl CameraFile {
    pub fn from_camera(cam: &Camera) -> Self {
        let k = &cam.intrinsics;
        let m = &cam.rotation;
        CameraFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            r: std::array::from_fn(|i| m[(i / 3, i % 3)]),
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            intrinsics: Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vec3::from(self.t),
        };
        cam.validate(CAMERA_ORTHO_TOL)?;
        Ok(cam)
    }
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let s = serde_json::to_string_pretty(&CameraFile::from_camera(cam))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let err = |message: String| Error::CameraFile {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path)?;
    let file: CameraFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    file.to_camera().map_err(|e| err(e.to_string()))
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_png(path: &Path, img: &ColorImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.to_rgb8(),
        img.width,
        img.height,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_err(path, e))
}

/// Grayscale PNG of a scalar map rescaled to its own range.
pub fn write_png_gray(path: &Path, img: &ScalarImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.to_gray8_normalized(),
        img.width,
        img.height,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_err(path, e))
}

/// Grayscale PNG of a map with values in `[0, 1]`, such as coverage.
pub fn write_png_unit(path: &Path, img: &ScalarImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| crate::raster::quantize(*v)).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width,
        img.height,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_err(path, e))
}

pub fn read_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    ColorImage::from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Raw little-endian f32 dump of a scalar map.
pub fn write_f32_raw(path: &Path, img: &ScalarImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Contents of `scene.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene: AnalyticScene,
    pub config: DatasetConfig,
}

pub fn camera_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("cam_{i:03}.json"))
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:03}.png"))
}

pub fn write_dataset(dir: &Path, scene: &SceneFile, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(scene)? + "\n")?;
    for (i, (img, cam)) in data.images.iter().zip(&data.cameras).enumerate() {
        write_camera(&camera_path(dir, i), cam)?;
        write_png(&image_path(dir, i), img)?;
    }
    Ok(())
}

/// Loads `cam_000.json`, `img_000.png`, ... until the first missing camera.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut cameras = Vec::new();
    for i in 0.. {
        let cp = camera_path(dir, i);
        if !cp.exists() {
            break;
        }
        cameras.push(read_camera(&cp)?);
        images.push(read_png(&image_path(dir, i))?);
    }
    if cameras.is_empty() {
        return Err(Error::invalid(format!("no cam_000.json in {}", dir.display())));
    }
    Dataset::new(images, cameras)
}

pub fn read_scene_file(dir: &Path) -> Result<SceneFile> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?)
}
