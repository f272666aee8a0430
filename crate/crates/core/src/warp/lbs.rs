//! Skinning weights and the forward/backward blend-skinning warps.

use super::{Deformer, FrameGrad, FrameState, PoseGrad, PoseState, RestState};
use crate::geom::{Rigid, RigidGrad, Vec3};
use crate::nnet::{Grads, MlpTape, ParamStore};

/// Skinning weights at one point plus what the adjoint needs.
#[derive(Clone, Debug)]
pub struct SkinRecord {
    pub weights: Vec<f64>,
    delta: Option<MlpTape>,
}

#[derive(Clone, Debug)]
pub struct BackwardRecord {
    /// Point after removing root motion, `G⁻¹ X`.
    pub xr: Vec3,
    pub skin: SkinRecord,
    /// Blended `Σ_b W_b ΔJ_b⁻¹`.
    pub blend: Rigid,
    pub x_star: Vec3,
}

#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub skin: SkinRecord,
    /// Blended `Σ_b W_b ΔJ_b`.
    pub blend: Rigid,
    pub y: Vec3,
    pub x_t: Vec3,
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn blend(mats: &[Rigid], w: &[f64]) -> Rigid {
    let mut a = Rigid::zeros();
    for (m, &wb) in mats.iter().zip(w) {
        a.add_scaled(m, wb);
    }
    a
}

/// Accumulates `W_b · dA` into `out[b]` and returns `⟨dA, M_b⟩` per bone.
fn blend_vjp(mats: &[Rigid], w: &[f64], da: &RigidGrad, out: &mut [RigidGrad]) -> Vec<f64> {
    mats.iter()
        .zip(w)
        .zip(out.iter_mut())
        .map(|((m, &wb), o)| {
            o.r += da.r * wb;
            o.t += da.t * wb;
            m.r.dot(&da.r) + m.t.dot(&da.t)
        })
        .collect()
}

impl Deformer {
    /// `softmax_b(−(X−C_b)ᵀQ_b(X−C_b) + MLP_Δ(X, ω)_b)` against `pose`.
    pub fn skin(&self, store: &ParamStore, pose: &PoseState, x: &Vec3) -> SkinRecord {
        let nb = pose.bones.len();
        let mut logits = vec![0.0; nb];
        let delta = if self.use_delta {
            let tape = self.skin.forward_pre(store, x.as_slice(), &pose.delta_pre);
            logits.copy_from_slice(self.skin.output(&tape));
            Some(tape)
        } else {
            None
        };
        if self.use_gauss {
            for (l, b) in logits.iter_mut().zip(&pose.bones) {
                *l -= super::mahalanobis(x, b);
            }
        }
        softmax_in_place(&mut logits);
        SkinRecord {
            weights: logits,
            delta,
        }
    }

    /// Given ∂L/∂W, accumulates pose gradients and returns ∂L/∂X.
    pub fn skin_vjp(
        &self,
        store: &ParamStore,
        pose: &PoseState,
        x: &Vec3,
        rec: &SkinRecord,
        d_w: &[f64],
        pg: &mut PoseGrad,
        grads: &mut Grads,
    ) -> Vec3 {
        let w = &rec.weights;
        let mean: f64 = w.iter().zip(d_w).map(|(a, b)| a * b).sum();
        let d_logit: Vec<f64> = w.iter().zip(d_w).map(|(wi, di)| wi * (di - mean)).collect();
        let mut dx = [0.0; 3];
        if let Some(tape) = &rec.delta {
            let dp = self
                .skin
                .backward_pre(store, tape, &d_logit, grads, Some(&mut dx));
            for (a, b) in pg.delta_pre.iter_mut().zip(&dp) {
                *a += b;
            }
        }
        let mut dx = Vec3::from(dx);
        if self.use_gauss {
            for (b, bone) in pose.bones.iter().enumerate() {
                let dl = d_logit[b];
                if dl == 0.0 {
                    continue;
                }
                let d = x - bone.center;
                let qd = bone.q * d;
                let dd = qd * (-2.0 * dl);
                dx += dd;
                pg.centers[b] -= dd;
                pg.q[b] -= d * d.transpose() * dl;
            }
        }
        dx
    }

    /// `X* = [Σ_b W_b ΔJ_b⁻¹] · G⁻¹ X`, with weights evaluated at `G⁻¹ X`
    /// against the bones posed at this frame.
    pub fn warp_backward(&self, store: &ParamStore, fs: &FrameState, x: &Vec3) -> BackwardRecord {
        let xr = fs.g_inv.apply(x);
        let skin = self.skin(store, &fs.pose, &xr);
        let blend = blend(&fs.dj_inv, &skin.weights);
        BackwardRecord {
            x_star: blend.apply(&xr),
            xr,
            skin,
            blend,
        }
    }

    /// Returns ∂L/∂X given ∂L/∂X*.
    pub fn warp_backward_vjp(
        &self,
        store: &ParamStore,
        fs: &FrameState,
        x: &Vec3,
        rec: &BackwardRecord,
        d_xstar: &Vec3,
        fg: &mut FrameGrad,
        grads: &mut Grads,
    ) -> Vec3 {
        let mut da = RigidGrad::default();
        let mut dxr = rec.blend.apply_vjp(&rec.xr, d_xstar, &mut da);
        let d_w = blend_vjp(&fs.dj_inv, &rec.skin.weights, &da, &mut fg.dj_inv);
        dxr += self.skin_vjp(
            store,
            &fs.pose,
            &rec.xr,
            &rec.skin,
            &d_w,
            &mut fg.pose,
            grads,
        );
        fs.g_inv.apply_vjp(x, &dxr, &mut fg.g_inv)
    }

    /// `X = G · [Σ_b W_b ΔJ_b] · X*`, with weights evaluated at `X*` against
    /// the rest bones.
    pub fn warp_forward(
        &self,
        store: &ParamStore,
        rest: &RestState,
        fs: &FrameState,
        x_star: &Vec3,
    ) -> ForwardRecord {
        let skin = self.skin(store, &rest.pose, x_star);
        let blend = blend(&fs.dj, &skin.weights);
        let y = blend.apply(x_star);
        ForwardRecord {
            x_t: fs.g.apply(&y),
            skin,
            blend,
            y,
        }
    }

    /// Returns ∂L/∂X* given ∂L/∂X. Rest-pose gradients go to `rest_grad`.
    #[allow(clippy::too_many_arguments)]
    pub fn warp_forward_vjp(
        &self,
        store: &ParamStore,
        rest: &RestState,
        fs: &FrameState,
        x_star: &Vec3,
        rec: &ForwardRecord,
        d_xt: &Vec3,
        fg: &mut FrameGrad,
        rest_grad: &mut PoseGrad,
        grads: &mut Grads,
    ) -> Vec3 {
        let dy = fs.g.apply_vjp(&rec.y, d_xt, &mut fg.g);
        let mut da = RigidGrad::default();
        let mut dx = rec.blend.apply_vjp(x_star, &dy, &mut da);
        let d_w = blend_vjp(&fs.dj, &rec.skin.weights, &da, &mut fg.dj);
        dx += self.skin_vjp(store, &rest.pose, x_star, &rec.skin, &d_w, rest_grad, grads);
        dx
    }
}
