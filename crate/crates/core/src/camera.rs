//! Pinhole cameras, primary rays and orbit poses.
//!
//! Convention: right-handed world; in the camera frame x points right, y
//! points down and the camera looks along +z. Pixel (0,0) is the top-left
//! corner of the image. `rotation` maps camera-frame directions to world.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Bounds, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn from_fov_y(width: u32, height: u32, fov_y: f64) -> Self {
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates.
    pub translation: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Parametric interval of a ray inside a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t_near: f64,
    pub t_far: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let cam = Camera {
            intrinsics,
            rotation,
            translation,
        };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || k.width == 0 || k.height == 0 {
            return Err(Error::invalid("camera needs fx, fy > 0 and a non-empty image"));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= tol) || self.rotation.determinant() < 0.0 {
            return Err(Error::invalid(format!(
                "camera rotation is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Camera forward axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray_for_pixel(&self, px: u32, py: u32) -> Result<Ray> {
        if px >= self.width() || py >= self.height() {
            return Err(Error::invalid(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width(),
                self.height()
            )));
        }
        Ok(self.ray_through(px as f64 + 0.5, py as f64 + 0.5))
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let d = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        Ray::new(self.translation, self.rotation * d)
    }

    /// Pinhole projection of a world point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let q = self.rotation.transpose() * (p - self.translation);
        if q.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy))
    }

    /// Same pose with the image resampled to `width x height`.
    pub fn with_resolution(&self, width: u32, height: u32) -> Camera {
        let k = &self.intrinsics;
        let sx = width as f64 / k.width as f64;
        let sy = height as f64 / k.height as f64;
        Camera {
            intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
                width,
                height,
            },
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Camera at `position` looking at `target`; image "down" follows world +y.
    pub fn look_at(intrinsics: Intrinsics, position: Vec3, target: Vec3) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera position coincides with its target"))?;
        let right = Vec3::new(0.0, 1.0, 0.0)
            .cross(&forward)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::invalid("look-at direction is parallel to the up axis"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Camera::new(intrinsics, rotation, position)
    }
}

/// Slab test clamped to `t >= 0`. Misses when the overlap is empty.
pub fn intersect_aabb(ray: &Ray, bounds: &Bounds) -> Option<Hit> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < bounds.min[a] || o > bounds.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut ta = (bounds.min[a] - o) * inv;
        let mut tb = (bounds.max[a] - o) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some(Hit {
        t_near: t0,
        t_far: t1,
    })
}

/// Camera on a circular orbit around the world origin. Azimuth 0 sits on the
/// -z axis; positive elevation lifts the camera toward world -y (image up).
pub fn orbit_camera(azimuth: f64, radius: f64, elevation: f64, intrinsics: Intrinsics) -> Result<Camera> {
    if !(radius > 0.0) {
        return Err(Error::invalid("orbit radius must be positive"));
    }
    if !(elevation.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(Error::invalid("orbit elevation must lie strictly between -90 and 90 degrees"));
    }
    let position = Vec3::new(
        radius * elevation.cos() * azimuth.sin(),
        -radius * elevation.sin(),
        -radius * elevation.cos() * azimuth.cos(),
    );
    Camera::look_at(intrinsics, position, Vec3::zeros())
}

/// `n` cameras at azimuths `2πk/n`, all looking at the origin.
pub fn orbit_cameras(n: usize, radius: f64, elevation: f64, intrinsics: Intrinsics) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::invalid("orbit needs at least one camera"));
    }
    (0..n)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / n as f64;
            orbit_camera(az, radius, elevation, intrinsics)
        })
        .collect()
}
