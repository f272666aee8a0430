use super::se3::Vec3;
use crate::error::{Error, Result};

/// Pinhole intrinsics and image size. Pixel `(i, j)` covers
/// `[i, i+1) × [j, j+1)`; its centre is `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A camera-space ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: [f64; 2],
}

impl Ray {
    pub fn point_at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Camera> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Dataset(format!("invalid camera {self:?}")))
        }
    }

    pub fn project(&self, x: &Vec3) -> Result<[f64; 2]> {
        if x.z <= 0.0 {
            return Err(Error::NonPositiveDepth(x.z));
        }
        Ok([self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy])
    }

    /// Returns `(∂L/∂X, ∂L/∂fx, ∂L/∂fy)` given ∂L/∂(pixel).
    pub fn project_vjp(&self, x: &Vec3, d_px: [f64; 2]) -> (Vec3, f64, f64) {
        let iz = 1.0 / x.z;
        let dx = Vec3::new(
            d_px[0] * self.fx * iz,
            d_px[1] * self.fy * iz,
            -(d_px[0] * self.fx * x.x + d_px[1] * self.fy * x.y) * iz * iz,
        );
        (dx, d_px[0] * x.x * iz, d_px[1] * x.y * iz)
    }

    /// Unnormalised direction with unit depth: `((x−cx)/fx, (y−cy)/fy, 1)`.
    pub fn unproject_depth(&self, px: [f64; 2]) -> Vec3 {
        Vec3::new(
            (px[0] - self.cx) / self.fx,
            (px[1] - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn pixel_ray(&self, px: [f64; 2]) -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: self.unproject_depth(px).normalize(),
            pixel: px,
        }
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 + 0.5, j as f64 + 0.5]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}
