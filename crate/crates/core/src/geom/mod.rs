//! Rigid-body and camera geometry.

mod camera;
mod icp;
mod se3;

pub use camera::{Camera, Ray};
pub use icp::{icp_similarity_align, nearest, umeyama, IcpResult, PointIndex};
pub use se3::{
    log_rotation, rodrigues, rodrigues_vjp, rotation_angle, skew, vee, Mat3, Rigid, RigidGrad, Se3,
    Vec3,
};

/// Angle of `a · bᵀ`, in `[0, π]`.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a * b.transpose()))
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn cube(half: f64) -> Aabb {
        Aabb::new(Vec3::repeat(-half), Vec3::repeat(half))
    }

    /// Finite with `min < max` on every axis.
    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| {
            self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k]
        })
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        std::array::from_fn(|i| {
            Vec3::new(
                if i & 1 == 0 { a.x } else { b.x },
                if i & 2 == 0 { a.y } else { b.y },
                if i & 4 == 0 { a.z } else { b.z },
            )
        })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn of_points(pts: &[Vec3]) -> Option<Aabb> {
        let first = pts.first()?;
        let mut b = Aabb::new(*first, *first);
        for p in pts {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn padded(&self, frac: f64) -> Aabb {
        let pad = (self.max - self.min) * frac;
        Aabb::new(self.min - pad, self.max + pad)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }
}
