//! Rigid transforms in angle-axis form and their 3×4 matrix counterparts,
//! with vector-Jacobian products for reverse-mode use.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients use their Taylor series.
const SMALL_ANGLE: f64 = 0.05;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part scaled by two:
/// `vee(A) = (A₂₁, A₀₂, A₁₀)`.
#[inline]
pub fn vee(a: &Mat3) -> Vec3 {
    Vec3::new(a[(2, 1)], a[(0, 2)], a[(1, 0)])
}

/// `(a, b, da/ds, db/ds)` for `R = I + a K + b K²` with `s = θ²`.
fn rodrigues_coeffs(s: f64) -> (f64, f64, f64, f64) {
    let theta = s.sqrt();
    if theta < SMALL_ANGLE {
        let a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        let da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90720.0;
        let db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s * s * s / 907200.0;
        (a, b, da, db)
    } else {
        let (sn, cs) = theta.sin_cos();
        let a = sn / theta;
        let b = (1.0 - cs) / s;
        let da = (theta * cs - sn) / (2.0 * theta * s);
        let db = (theta * sn - 2.0 * (1.0 - cs)) / (2.0 * s * s);
        (a, b, da, db)
    }
}

/// Rotation matrix of an angle-axis vector.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let (a, b, _, _) = rodrigues_coeffs(w.norm_squared());
    let k = skew(w);
    Mat3::identity() + k * a + k * k * b
}

/// ∂L/∂w given ∂L/∂R.
pub fn rodrigues_vjp(w: &Vec3, d_r: &Mat3) -> Vec3 {
    let (a, b, da, db) = rodrigues_coeffs(w.norm_squared());
    let k = skew(w);
    let k2 = k * k;
    let g_k = d_r.dot(&k);
    let g_k2 = d_r.dot(&k2);
    let m = d_r * k.transpose() + k.transpose() * d_r;
    w * (2.0 * (da * g_k + db * g_k2))
        + vee(&(d_r - d_r.transpose())) * a
        + vee(&(m - m.transpose())) * b
}

/// Rotation angle in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = vee(&(r - r.transpose())).norm() / 2.0;
    s.atan2(c)
}

/// Angle-axis vector of a rotation matrix (inverse of [`rodrigues`]).
pub fn log_rotation(r: &Mat3) -> Vec3 {
    let theta = rotation_angle(r);
    let v = vee(&(r - r.transpose()));
    if theta < 1e-6 {
        return v * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return v * (theta / (2.0 * theta.sin()));
    }
    // Near a half turn: recover the axis from the symmetric part.
    let cos = theta.cos();
    let kk = ((r + r.transpose()) * 0.5 - Mat3::identity() * cos) / (1.0 - cos);
    let i = (0..3)
        .max_by(|&i, &j| kk[(i, i)].total_cmp(&kk[(j, j)]))
        .unwrap();
    let mut axis = kk.column(i).into_owned();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// A rigid transform `X ↦ R X + t` with `R = exp([rotation]×)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rotation: Vec3::zeros(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Se3 {
            rotation,
            translation,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Se3::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn to_rigid(&self) -> Rigid {
        Rigid {
            r: rodrigues(&self.rotation),
            t: self.translation,
        }
    }

    pub fn from_rigid(m: &Rigid) -> Self {
        Se3::new(log_rotation(&m.r), m.t)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.to_rigid().apply(x)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3::from_rigid(&self.to_rigid().compose(&other.to_rigid()))
    }

    pub fn inverse(&self) -> Se3 {
        Se3::from_rigid(&self.to_rigid().inverse())
    }
}

/// A 3×4 affine map `[R | t]`. Also holds linear blends of rigid maps, whose
/// linear part is no longer orthonormal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

/// Gradient with respect to the entries of a [`Rigid`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidGrad {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for RigidGrad {
    fn default() -> Self {
        RigidGrad {
            r: Mat3::zeros(),
            t: Vec3::zeros(),
        }
    }
}

impl std::ops::AddAssign for RigidGrad {
    fn add_assign(&mut self, o: RigidGrad) {
        self.r += o.r;
        self.t += o.t;
    }
}

impl RigidGrad {
    pub fn is_zero(&self) -> bool {
        self.r.iter().all(|&x| x == 0.0) && self.t.iter().all(|&x| x == 0.0)
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Rigid {
            r: Mat3::identity(),
            t: Vec3::zeros(),
        }
    }

    pub fn zeros() -> Self {
        Rigid {
            r: Mat3::zeros(),
            t: Vec3::zeros(),
        }
    }

    pub fn new(r: Mat3, t: Vec3) -> Self {
        Rigid { r, t }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.r * x + self.t
    }

    /// Accumulates ∂L/∂self and returns ∂L/∂x for `y = apply(x)`.
    #[inline]
    pub fn apply_vjp(&self, x: &Vec3, dy: &Vec3, grad: &mut RigidGrad) -> Vec3 {
        grad.r += dy * x.transpose();
        grad.t += dy;
        self.r.transpose() * dy
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    /// Returns (∂L/∂self, ∂L/∂other) for `c = self.compose(other)`.
    pub fn compose_vjp(&self, other: &Rigid, dc: &RigidGrad) -> (RigidGrad, RigidGrad) {
        let da = RigidGrad {
            r: dc.r * other.r.transpose() + dc.t * other.t.transpose(),
            t: dc.t,
        };
        let db = RigidGrad {
            r: self.r.transpose() * dc.r,
            t: self.r.transpose() * dc.t,
        };
        (da, db)
    }

    /// Inverse of a rigid (orthonormal) map.
    pub fn inverse(&self) -> Rigid {
        let rt = self.r.transpose();
        Rigid {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// ∂L/∂self given ∂L/∂(self.inverse()), assuming orthonormal `r`.
    pub fn inverse_vjp(&self, dinv: &RigidGrad) -> RigidGrad {
        RigidGrad {
            r: dinv.r.transpose() - self.t * dinv.t.transpose(),
            t: -(self.r * dinv.t),
        }
    }

    pub fn scaled(&self, w: f64) -> Rigid {
        Rigid {
            r: self.r * w,
            t: self.t * w,
        }
    }

    pub fn add_scaled(&mut self, other: &Rigid, w: f64) {
        self.r += other.r * w;
        self.t += other.t * w;
    }

    pub fn max_abs_diff(&self, other: &Rigid) -> f64 {
        (self.r - other.r)
            .abs()
            .max()
            .max((self.t - other.t).abs().max())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    #[test]
    fn identity_apply() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Se3::identity().apply(&x), x);
    }

    #[test]
    fn half_turn_about_z() {
        let t = Se3::new(Vec3::new(0.0, 0.0, PI), Vec3::zeros());
        let y = t.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((y - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for theta in [SMALL_ANGLE * 0.999_999, SMALL_ANGLE * 1.000_001] {
            let w = Vec3::new(0.3, -0.5, 0.8).normalize() * theta;
            let exact = nalgebra::Rotation3::from_scaled_axis(w).into_inner();
            assert!((rodrigues(&w) - exact).abs().max() < 1e-15);
        }
    }

    #[test]
    fn rodrigues_vjp_matches_finite_differences() {
        let g = Mat3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, -0.7, 0.6, 1.1);
        for w in [
            Vec3::new(0.4, -0.2, 0.9),
            Vec3::new(1e-3, 2e-3, -1e-3),
            Vec3::new(0.02, -0.01, 0.03),
            Vec3::zeros(),
            Vec3::new(2.0, 1.0, -1.5),
        ] {
            let an = rodrigues_vjp(&w, &g);
            let h = 1e-6;
            for i in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[i] += h;
                wm[i] -= h;
                let fd = (rodrigues(&wp).dot(&g) - rodrigues(&wm).dot(&g)) / (2.0 * h);
                assert!(
                    (fd - an[i]).abs() < 1e-8,
                    "w={w:?} i={i}: {fd} vs {}",
                    an[i]
                );
            }
        }
    }

    #[test]
    fn log_near_half_turn() {
        let w = Vec3::new(1.0, 2.0, -0.5).normalize() * (PI - 1e-6);
        let back = log_rotation(&rodrigues(&w));
        assert!((back - w).norm() < 1e-6);
    }

    proptest! {
        #[test]
        fn inverse_round_trip(rot in vec3(), tr in vec3(), x in vec3()) {
            let t = Se3::new(rot, tr);
            let y = t.inverse().apply(&t.apply(&x));
            prop_assert!((y - x).norm() < 1e-9);
            let id = t.to_rigid().compose(&t.to_rigid().inverse());
            prop_assert!(id.max_abs_diff(&Rigid::identity()) < 1e-9);
        }

        #[test]
        fn rotation_is_orthonormal(rot in vec3()) {
            let r = rodrigues(&rot);
            prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_round_trip(axis in vec3(), angle in 1e-6..(PI - 1e-3)) {
            prop_assume!(axis.norm() > 1e-3);
            let w = axis.normalize() * angle;
            prop_assert!((log_rotation(&rodrigues(&w)) - w).norm() < 1e-9);
        }

        #[test]
        fn rotation_preserves_norm(rot in vec3(), x in vec3()) {
            let y = Se3::new(rot, Vec3::zeros()).apply(&x);
            prop_assert!((y.norm() - x.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_and_inverse_vjps() {
        let a = Se3::new(Vec3::new(0.2, -0.4, 0.1), Vec3::new(0.5, 1.0, -2.0)).to_rigid();
        let b = Se3::new(Vec3::new(-0.3, 0.7, 0.2), Vec3::new(-1.0, 0.2, 0.3)).to_rigid();
        let gc = RigidGrad {
            r: Mat3::new(0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9),
            t: Vec3::new(1.0, -2.0, 0.5),
        };
        let loss = |c: &Rigid| c.r.dot(&gc.r) + c.t.dot(&gc.t);
        let (da, db) = a.compose_vjp(&b, &gc);
        let h = 1e-6;
        for i in 0..12 {
            let bump = |m: &Rigid, s: f64| {
                let mut m = *m;
                if i < 9 {
                    m.r[(i / 3, i % 3)] += s;
                } else {
                    m.t[i - 9] += s;
                }
                m
            };
            let pick = |g: &RigidGrad| {
                if i < 9 {
                    g.r[(i / 3, i % 3)]
                } else {
                    g.t[i - 9]
                }
            };
            let fa = (loss(&bump(&a, h).compose(&b)) - loss(&bump(&a, -h).compose(&b))) / (2.0 * h);
            let fb = (loss(&a.compose(&bump(&b, h))) - loss(&a.compose(&bump(&b, -h)))) / (2.0 * h);
            assert!((fa - pick(&da)).abs() < 1e-8);
            assert!((fb - pick(&db)).abs() < 1e-8);
        }
        // inverse: perturb through the angle-axis so the map stays rigid
        let w = Vec3::new(0.2, -0.4, 0.1);
        let t = Vec3::new(0.5, 1.0, -2.0);
        let f = |w: &Vec3, t: &Vec3| loss(&Rigid::new(rodrigues(w), *t).inverse());
        let base = Rigid::new(rodrigues(&w), t);
        let d = base.inverse_vjp(&gc);
        let dw = rodrigues_vjp(&w, &d.r);
        for i in 0..3 {
            let mut wp = w;
            let mut wm = w;
            wp[i] += h;
            wm[i] -= h;
            assert!(((f(&wp, &t) - f(&wm, &t)) / (2.0 * h) - dw[i]).abs() < 1e-8);
            let mut tp = t;
            let mut tm = t;
            tp[i] += h;
            tm[i] -= h;
            assert!(((f(&w, &tp) - f(&w, &tm)) / (2.0 * h) - d.t[i]).abs() < 1e-8);
        }
    }
}
