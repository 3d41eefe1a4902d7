use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Vec3;

/// Pinhole intrinsics in pixels. Pixel `(x, y)` has its center at
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn from_fov(fov_y_deg: f64, width: usize, height: usize) -> Self {
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }
}

/// World-to-camera rigid transform plus intrinsics.
///
/// Camera axes: x right, y down, z forward; depth is the camera-space z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let f = target - eye;
        if f.norm() == 0.0 {
            return Err(Error::config("camera", "eye and target coincide"));
        }
        let f = f.normalize();
        let mut r = f.cross(&up);
        if r.norm() < 1e-9 {
            // looking along `up`: any perpendicular works
            let alt = if f.x.abs() < 0.9 {
                Vec3::x()
            } else {
                Vec3::z()
            };
            r = f.cross(&alt);
        }
        let r = r.normalize();
        let d = f.cross(&r);
        let rotation = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::config(
                "camera.intrinsics",
                "focal lengths must be positive",
            ));
        }
        if k.width == 0 || k.height == 0 {
            return Err(Error::config("camera.intrinsics", "empty image"));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-6 {
            return Err(Error::config("camera.rotation", "not orthonormal"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera center `o` in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and depth of a world point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    /// World-space ray direction through pixel coordinates `(u, v)`, scaled
    /// so that the ray parameter equals depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.rotation.transpose() * d
    }

    /// World point at pixel coordinates `(u, v)` and depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        self.position() + self.ray_direction(u, v) * z
    }

    /// Angle in radians between the optical axes of two cameras.
    pub fn axis_angle(&self, other: &Camera) -> f64 {
        self.forward().dot(&other.forward()).clamp(-1.0, 1.0).acos()
    }
}
