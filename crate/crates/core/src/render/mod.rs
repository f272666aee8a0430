//! Volume rendering primitives: depth sampling, transmittance compositing and
//! its adjoint, near/far planes, and image containers.

mod image;

pub use image::{
    read_float, read_pgm, read_ppm, write_float, write_float_text, write_pgm, write_ppm, Image,
};

use crate::canonical::sdf_to_density;
use crate::error::{Error, Result};
use crate::geom::{Aabb, Ray, Rigid, Vec3};

/// Minimum opacity for a ray to take part in the feature losses.
pub const TAU_MIN: f64 = 0.2;

/// `n` increasing depths in `[near, far)`, one per equal-width stratum at
/// offset `u_i ∈ [0, 1)` (0.5 without jitter).
pub fn stratified_depths(near: f64, far: f64, n: usize, jitter: Option<&[f64]>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| near + (i as f64 + jitter.map_or(0.5, |u| u[i])) * step)
        .collect()
}

/// Gap to the next sample; the last sample reuses the previous gap.
pub fn sample_gaps(depths: &[f64]) -> Vec<f64> {
    let n = depths.len();
    let mut d: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if n >= 2 {
        d.push(d[n - 2]);
    } else if n == 1 {
        d.push(0.0);
    }
    d
}

/// Visibility weights from per-sample optical thickness `a_i = κ_i δ_i`.
///
/// `trans[i] = Π_{j<i} p_j` with `p_j = exp(−a_j)`; `trans[n]` is the
/// residual transmission, so `Σ τ_i + trans[n] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub tau: Vec<f64>,
    pub trans: Vec<f64>,
}

impl Composite {
    pub fn opacity(&self) -> f64 {
        self.tau.iter().sum()
    }

    pub fn residual(&self) -> f64 {
        *self.trans.last().unwrap()
    }
}

pub fn composite(thickness: &[f64]) -> Composite {
    let n = thickness.len();
    let mut tau = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n + 1);
    let mut log_t = 0.0f64;
    trans.push(1.0);
    for &a in thickness {
        let t = log_t.exp();
        tau.push(-t * (-a).exp_m1());
        log_t -= a;
        trans.push(log_t.exp());
    }
    Composite { tau, trans }
}

/// ∂L/∂a given ∂L/∂τ: `dτ_k T_{k+1} − Σ_{i>k} dτ_i τ_i`.
pub fn composite_vjp(c: &Composite, d_tau: &[f64]) -> Vec<f64> {
    let n = c.tau.len();
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        out[k] = d_tau[k] * c.trans[k + 1] - suffix;
        suffix += d_tau[k] * c.tau[k];
    }
    out
}

/// `Σ τ_i c_i + (1 − o)·background`.
pub fn composite_color(tau: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut o = 0.0;
    for (t, c) in tau.iter().zip(colors) {
        for k in 0..3 {
            out[k] += t * c[k];
        }
        o += t;
    }
    for k in 0..3 {
        out[k] += (1.0 - o) * background[k];
    }
    out
}

/// Unnormalised `Σ τ_i X_i`; fails when the opacity is below `tau_min`.
pub fn expected_point(tau: &[f64], pts: &[Vec3], tau_min: f64) -> Result<Vec3> {
    let o: f64 = tau.iter().sum();
    if o < tau_min {
        return Err(Error::LowOpacity(o));
    }
    Ok(tau
        .iter()
        .zip(pts)
        .fold(Vec3::zeros(), |a, (t, p)| a + p * *t))
}

/// Near/far depths from the corners of `bounds` posed by `g`, padded by
/// 20% of their spread.
pub fn near_far(g: &Rigid, bounds: &Aabb) -> Result<(f64, f64)> {
    let depths: Vec<f64> = bounds.corners().iter().map(|c| g.apply(c).z).collect();
    near_far_from_depths(&depths)
}

pub fn near_far_from_depths(depths: &[f64]) -> Result<(f64, f64)> {
    let lo = depths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateDepths);
    }
    if hi <= 0.0 {
        return Err(Error::NonPositiveDepth(hi));
    }
    if hi <= lo {
        return Err(Error::DegenerateDepths);
    }
    let eps = 0.2 * (hi - lo);
    Ok((lo - eps, hi + eps))
}

/// Depth interval `[z₀, z₁]` where the ray `X = z·q` (z > 0) lies inside
/// the sphere `|X − c| ≤ r`; `None` when it misses.
pub fn ray_sphere_depths(q: &Vec3, center: &Vec3, radius: f64) -> Option<(f64, f64)> {
    let a = q.norm_squared();
    let b = q.dot(center);
    let disc = b * b - a * (center.norm_squared() - radius * radius);
    if disc <= 0.0 || a == 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (z0, z1) = ((b - s) / a, (b + s) / a);
    let far = z1;
    let near = z0.max(1e-3 * far);
    (far > 0.0 && near < far).then_some((near, far))
}

/// Adjoint of [`ray_sphere_depths`]: `(∂/∂q, ∂/∂center)` from the
/// gradients of `near` and `far`.
pub fn ray_sphere_depths_vjp(
    q: &Vec3,
    center: &Vec3,
    radius: f64,
    d_near: f64,
    d_far: f64,
) -> (Vec3, Vec3) {
    let a = q.norm_squared();
    let b = q.dot(center);
    let k = center.norm_squared() - radius * radius;
    let s = (b * b - a * k).sqrt();
    let z0 = (b - s) / a;
    let z1 = (b + s) / a;
    let ds_dq = (center * b - q * k) / s;
    let ds_dc = (q * b - center * a) / s;
    let dz0_dq = (center - ds_dq) / a - q * (2.0 * z0 / a);
    let dz1_dq = (center + ds_dq) / a - q * (2.0 * z1 / a);
    let dz0_dc = (q - ds_dc) / a;
    let dz1_dc = (q + ds_dc) / a;
    let (d0, d1) = if z0 >= 1e-3 * z1 {
        (d_near, d_far)
    } else {
        (0.0, d_far + 1e-3 * d_near)
    };
    (dz0_dq * d0 + dz1_dq * d1, dz0_dc * d0 + dz1_dc * d1)
}

/// One ray marched through a standalone SDF.
#[derive(Clone, Debug)]
pub struct RayMarch {
    pub depths: Vec<f64>,
    pub sigma: Vec<f64>,
    pub composite: Composite,
}

impl RayMarch {
    pub fn opacity(&self) -> f64 {
        self.composite.opacity()
    }

    /// `Σ τ_i s_i / Σ τ_i`, or `None` for an empty ray.
    pub fn depth(&self) -> Option<f64> {
        let o = self.opacity();
        (o > 0.0).then(|| {
            self.composite
                .tau
                .iter()
                .zip(&self.depths)
                .map(|(t, d)| t * d)
                .sum::<f64>()
                / o
        })
    }
}

/// Samples `n` points at distances `[near, far]` along `ray`, converts the
/// SDF to density and composites with extinction `σ/β`.
pub fn march_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    n: usize,
    beta: f64,
    jitter: Option<&[f64]>,
    sdf: impl Fn(&Vec3) -> f64,
) -> Result<RayMarch> {
    if !(near < far) || !near.is_finite() || !far.is_finite() || n < 2 {
        return Err(Error::InvalidNearFar { near, far });
    }
    let depths = stratified_depths(near, far, n, jitter);
    let gaps = sample_gaps(&depths);
    let sigma: Vec<f64> = depths
        .iter()
        .map(|&s| sdf_to_density(sdf(&ray.point_at(s)), beta))
        .collect();
    let thick: Vec<f64> = sigma.iter().zip(&gaps).map(|(s, d)| s / beta * d).collect();
    Ok(RayMarch {
        composite: composite(&thick),
        depths,
        sigma,
    })
}
