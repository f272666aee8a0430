//! Gaussian-ellipsoid bones: zero configuration, posing and export.

use crate::canonical::fibonacci_sphere;
use crate::error::Result;
use crate::geom::{log_rotation, rodrigues, rodrigues_vjp, Mat3, Rigid, RigidGrad, Vec3};
use crate::nnet::{Grads, Group, ParamId, ParamStore};

/// Learnable zero-configuration bone parameters: centers, orientations
/// (angle-axis) and log precisions, each `[B, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct BoneParams {
    pub center: ParamId,
    pub orient: ParamId,
    pub log_scale: ParamId,
    pub count: usize,
}

/// One bone in zero configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bone {
    pub center: Vec3,
    pub orient: Vec3,
    pub v: Mat3,
    /// Diagonal of Λ⁰ (precision, inverse squared length).
    pub precision: Vec3,
}

/// A bone moved by a rigid transform `J`: `(V|C) = J·(V⁰|C⁰)` and
/// `Q = V Λ⁰ Vᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosedBone {
    pub center: Vec3,
    pub v: Mat3,
    pub q: Mat3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoneGrad {
    pub center: Vec3,
    pub v: Mat3,
    pub precision: Vec3,
}

impl Default for Bone {
    fn default() -> Self {
        Bone {
            center: Vec3::zeros(),
            orient: Vec3::zeros(),
            v: Mat3::identity(),
            precision: Vec3::repeat(1.0),
        }
    }
}

impl BoneParams {
    /// Centers on a Fibonacci lattice over the sphere of `radius`, identity
    /// orientations, isotropic `precision`.
    pub fn register(
        store: &mut ParamStore,
        count: usize,
        radius: f64,
        precision: f64,
    ) -> Result<BoneParams> {
        let centers: Vec<f64> = if count == 1 {
            vec![0.0; 3]
        } else {
            fibonacci_sphere(count, radius)
                .iter()
                .flat_map(|c| [c.x, c.y, c.z])
                .collect()
        };
        let center = store.add("bones.center", &[count, 3], Group::Bone, centers)?;
        let orient = store.add_zeros("bones.orient", &[count, 3], Group::Bone)?;
        let log_scale = store.add(
            "bones.log_scale",
            &[count, 3],
            Group::Bone,
            vec![precision.ln(); 3 * count],
        )?;
        Ok(BoneParams {
            center,
            orient,
            log_scale,
            count,
        })
    }

    pub fn attach(store: &ParamStore) -> Result<BoneParams> {
        let center = store.require("bones.center")?;
        Ok(BoneParams {
            count: store.tensor(center).shape[0],
            center,
            orient: store.require("bones.orient")?,
            log_scale: store.require("bones.log_scale")?,
        })
    }

    pub fn zero_config(&self, store: &ParamStore) -> Vec<Bone> {
        let (c, o, s) = (
            store.get(self.center),
            store.get(self.orient),
            store.get(self.log_scale),
        );
        (0..self.count)
            .map(|b| {
                let orient = Vec3::new(o[3 * b], o[3 * b + 1], o[3 * b + 2]);
                Bone {
                    center: Vec3::new(c[3 * b], c[3 * b + 1], c[3 * b + 2]),
                    orient,
                    v: rodrigues(&orient),
                    precision: Vec3::new(s[3 * b].exp(), s[3 * b + 1].exp(), s[3 * b + 2].exp()),
                }
            })
            .collect()
    }

    /// Writes zero-configuration gradients into `grads`.
    pub fn backward(&self, bones: &[Bone], d: &[BoneGrad], grads: &mut Grads) {
        let n = 3 * self.count;
        let mut dc = vec![0.0; n];
        let mut dor = vec![0.0; n];
        let mut ds = vec![0.0; n];
        for (b, (bone, g)) in bones.iter().zip(d).enumerate() {
            let dw = rodrigues_vjp(&bone.orient, &g.v);
            for k in 0..3 {
                dc[3 * b + k] = g.center[k];
                dor[3 * b + k] = dw[k];
                ds[3 * b + k] = g.precision[k] * bone.precision[k];
            }
        }
        for (id, v) in [(self.center, dc), (self.orient, dor), (self.log_scale, ds)] {
            for (a, b) in grads.slot(id, n).iter_mut().zip(&v) {
                *a += b;
            }
        }
    }
}

pub fn pose_bone(bone: &Bone, j: &Rigid) -> PosedBone {
    let v = j.r * bone.v;
    PosedBone {
        center: j.apply(&bone.center),
        v,
        q: v * Mat3::from_diagonal(&bone.precision) * v.transpose(),
    }
}

/// Adds ∂L/∂J into `dj` and ∂L/∂bone into `db`.
pub fn pose_bone_vjp(
    bone: &Bone,
    j: &Rigid,
    posed: &PosedBone,
    d_center: &Vec3,
    d_q: &Mat3,
    dj: &mut RigidGrad,
    db: &mut BoneGrad,
) {
    db.center += j.apply_vjp(&bone.center, d_center, dj);
    let lam = Mat3::from_diagonal(&bone.precision);
    let sym = d_q + d_q.transpose();
    let d_v = sym * posed.v * lam;
    let vt_dq_v = posed.v.transpose() * d_q * posed.v;
    for k in 0..3 {
        db.precision[k] += vt_dq_v[(k, k)];
    }
    dj.r += d_v * bone.v.transpose();
    db.v += j.r.transpose() * d_v;
}

#[inline]
pub fn mahalanobis(x: &Vec3, bone: &PosedBone) -> f64 {
    let d = x - bone.center;
    d.dot(&(bone.q * d))
}

/// One line per bone: center, orientation (angle-axis) and per-axis scale
/// `Λ^{-1/2}`.
pub fn export_bones(posed: &[PosedBone], zero: &[Bone]) -> String {
    let mut out = String::new();
    for (p, z) in posed.iter().zip(zero) {
        let o = log_rotation(&p.v);
        let s = z.precision.map(|l| 1.0 / l.sqrt());
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            p.center.x, p.center.y, p.center.z, o.x, o.y, o.z, s.x, s.y, s.z
        ));
    }
    out
}
