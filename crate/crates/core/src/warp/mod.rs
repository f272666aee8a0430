//! Deformation model: root and body poses decoded from latent codes,
//! Gaussian plus MLP skinning, and forward/backward linear blend skinning.

mod bones;
mod lbs;

pub use bones::{
    export_bones, mahalanobis, pose_bone, pose_bone_vjp, Bone, BoneGrad, BoneParams, PosedBone,
};
pub use lbs::{softmax_in_place as softmax, BackwardRecord, ForwardRecord, SkinRecord};

use rand::Rng;

use crate::error::Result;
use crate::geom::{rodrigues, rodrigues_vjp, Rigid, RigidGrad, Se3, Vec3};
use crate::nnet::{
    Activation, Grads, Group, Init, LatentCodes, Mlp, MlpSpec, MlpTape, ParamStore, POSE_CODE_DIM,
};

#[derive(Clone, Debug, PartialEq)]
pub struct WarpConfig {
    pub bones: usize,
    pub pose_hidden: Vec<usize>,
    pub skin_hidden: Vec<usize>,
    pub skin_freqs: usize,
    pub activation: Activation,
    pub bone_radius: f64,
    pub bone_precision: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            bones: 25,
            pose_hidden: vec![64, 64],
            skin_hidden: vec![64, 64],
            skin_freqs: 10,
            activation: Activation::Softplus(100.0),
            bone_radius: 0.3,
            bone_precision: 20.0,
        }
    }
}

impl WarpConfig {
    fn specs(&self) -> (MlpSpec, MlpSpec, MlpSpec) {
        let a = self.activation;
        let root = MlpSpec::new(POSE_CODE_DIM, &self.pose_hidden, 6, a);
        let body = MlpSpec::new(POSE_CODE_DIM, &self.pose_hidden, 6 * self.bones, a);
        let skin = MlpSpec::new(3, &self.skin_hidden, self.bones, a)
            .with_freqs(self.skin_freqs)
            .with_cond(POSE_CODE_DIM);
        (root, body, skin)
    }
}

/// Pose networks (MLP_G, MLP_J), the skinning residual MLP_Δ and the bones.
#[derive(Clone, Debug)]
pub struct Deformer {
    pub root: Mlp,
    pub body: Mlp,
    pub skin: Mlp,
    pub bones: BoneParams,
    /// Include the MLP_Δ residual in the skinning logits.
    pub use_delta: bool,
    /// Include the Gaussian (Mahalanobis) term in the skinning logits.
    pub use_gauss: bool,
}

/// Bones posed for one code plus the code's MLP_Δ first-layer term.
#[derive(Clone, Debug)]
pub struct PoseState {
    pub bones: Vec<PosedBone>,
    pub delta_pre: Vec<f64>,
    pub code: Vec<f64>,
}

/// Rest configuration: `J*_b = MLP_J(ω_b*)` and the bones it poses.
#[derive(Clone, Debug)]
pub struct RestState {
    pub zero: Vec<Bone>,
    pub j: Vec<Rigid>,
    pub j_inv: Vec<Rigid>,
    pub pose: PoseState,
    body_out: Vec<f64>,
    body_tape: MlpTape,
}

/// Everything the warps need at one time instance.
#[derive(Clone, Debug)]
pub struct FrameState {
    pub frame: usize,
    pub g0: Rigid,
    pub g: Rigid,
    pub g_inv: Rigid,
    /// `ΔJ_b = J_b · (J*_b)⁻¹`.
    pub dj: Vec<Rigid>,
    pub dj_inv: Vec<Rigid>,
    pub j: Vec<Rigid>,
    /// Bones posed by `J_b` (root-stabilised frame) with the frame's MLP_Δ term.
    pub pose: PoseState,
    delta_g: Rigid,
    root_out: Vec<f64>,
    root_tape: MlpTape,
    body_out: Vec<f64>,
    body_tape: MlpTape,
}

#[derive(Clone, Debug, Default)]
pub struct PoseGrad {
    pub centers: Vec<Vec3>,
    pub q: Vec<crate::geom::Mat3>,
    pub delta_pre: Vec<f64>,
}

impl PoseGrad {
    pub fn new(bones: usize, delta_width: usize) -> Self {
        PoseGrad {
            centers: vec![Vec3::zeros(); bones],
            q: vec![crate::geom::Mat3::zeros(); bones],
            delta_pre: vec![0.0; delta_width],
        }
    }

    fn add(&mut self, o: &PoseGrad) {
        for (a, b) in self.centers.iter_mut().zip(&o.centers) {
            *a += b;
        }
        for (a, b) in self.q.iter_mut().zip(&o.q) {
            *a += b;
        }
        for (a, b) in self.delta_pre.iter_mut().zip(&o.delta_pre) {
            *a += b;
        }
    }
}

/// Gradients with respect to one frame's state.
#[derive(Clone, Debug)]
pub struct FrameGrad {
    pub g: RigidGrad,
    pub g_inv: RigidGrad,
    pub dj: Vec<RigidGrad>,
    pub dj_inv: Vec<RigidGrad>,
    pub pose: PoseGrad,
}

impl FrameGrad {
    pub fn new(bones: usize, delta_width: usize) -> Self {
        FrameGrad {
            g: RigidGrad::default(),
            g_inv: RigidGrad::default(),
            dj: vec![RigidGrad::default(); bones],
            dj_inv: vec![RigidGrad::default(); bones],
            pose: PoseGrad::new(bones, delta_width),
        }
    }

    fn add(&mut self, o: &FrameGrad) {
        self.g += o.g;
        self.g_inv += o.g_inv;
        for (a, b) in self.dj.iter_mut().zip(&o.dj) {
            *a += *b;
        }
        for (a, b) in self.dj_inv.iter_mut().zip(&o.dj_inv) {
            *a += *b;
        }
        self.pose.add(&o.pose);
    }
}

/// Per-frame and rest-pose gradient accumulators for a batch.
#[derive(Clone, Debug)]
pub struct DeformGrad {
    pub frames: Vec<Option<FrameGrad>>,
    pub rest: PoseGrad,
    bones: usize,
    delta_width: usize,
}

impl DeformGrad {
    pub fn new(num_frames: usize, bones: usize, delta_width: usize) -> Self {
        DeformGrad {
            frames: vec![None; num_frames],
            rest: PoseGrad::new(bones, delta_width),
            bones,
            delta_width,
        }
    }

    pub fn frame(&mut self, t: usize) -> &mut FrameGrad {
        let (b, w) = (self.bones, self.delta_width);
        self.frames[t].get_or_insert_with(|| FrameGrad::new(b, w))
    }

    /// Mutable access to one frame's accumulator together with the rest
    /// accumulator.
    pub fn frame_and_rest(&mut self, t: usize) -> (&mut FrameGrad, &mut PoseGrad) {
        let (b, w) = (self.bones, self.delta_width);
        let f = self.frames[t].get_or_insert_with(|| FrameGrad::new(b, w));
        (f, &mut self.rest)
    }

    /// Adds `other` into `self` in frame order.
    pub fn merge(&mut self, other: &DeformGrad) {
        for (a, b) in self.frames.iter_mut().zip(&other.frames) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
        self.rest.add(&other.rest);
    }
}

fn se3_from(out: &[f64]) -> Rigid {
    Rigid::new(
        rodrigues(&Vec3::new(out[0], out[1], out[2])),
        Vec3::new(out[3], out[4], out[5]),
    )
}

fn se3_vjp(out: &[f64], d: &RigidGrad, d_out: &mut [f64]) {
    let dw = rodrigues_vjp(&Vec3::new(out[0], out[1], out[2]), &d.r);
    for k in 0..3 {
        d_out[k] += dw[k];
        d_out[3 + k] += d.t[k];
    }
}

fn add_row(grads: &mut Grads, id: crate::nnet::ParamId, len: usize, offset: usize, v: &[f64]) {
    let slot = grads.slot(id, len);
    for (a, b) in slot[offset..offset + v.len()].iter_mut().zip(v) {
        *a += b;
    }
}

impl Deformer {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &WarpConfig,
        rng: &mut R,
    ) -> Result<Deformer> {
        let (root, body, skin) = cfg.specs();
        Ok(Deformer {
            root: Mlp::register(store, "root", root, Group::Network, Init::ZeroOutput, rng)?,
            body: Mlp::register(store, "body", body, Group::Network, Init::ZeroOutput, rng)?,
            skin: Mlp::register(store, "skin", skin, Group::Network, Init::ZeroOutput, rng)?,
            bones: BoneParams::register(store, cfg.bones, cfg.bone_radius, cfg.bone_precision)?,
            use_delta: true,
            use_gauss: true,
        })
    }

    pub fn attach(store: &ParamStore, cfg: &WarpConfig) -> Result<Deformer> {
        let (root, body, skin) = cfg.specs();
        Ok(Deformer {
            root: Mlp::attach(store, "root", root)?,
            body: Mlp::attach(store, "body", body)?,
            skin: Mlp::attach(store, "skin", skin)?,
            bones: BoneParams::attach(store)?,
            use_delta: true,
            use_gauss: true,
        })
    }

    pub fn num_bones(&self) -> usize {
        self.bones.count
    }

    pub fn delta_width(&self) -> usize {
        self.skin
            .spec()
            .hidden
            .first()
            .copied()
            .unwrap_or(self.bones.count)
    }

    pub fn new_grad(&self, num_frames: usize) -> DeformGrad {
        DeformGrad::new(num_frames, self.num_bones(), self.delta_width())
    }

    /// `J_b = MLP_J(ω_b)` for every bone.
    pub fn body_pose(&self, store: &ParamStore, code: &[f64]) -> Vec<Rigid> {
        let (out, _) = self.body.forward(store, code, &[]);
        out.chunks_exact(6).map(se3_from).collect()
    }

    /// `G = MLP_G(ω_r) · G₀`.
    pub fn root_pose(&self, store: &ParamStore, code: &[f64], g0: &Se3) -> Rigid {
        let (out, _) = self.root.forward(store, code, &[]);
        se3_from(&out).compose(&g0.to_rigid())
    }

    fn pose_state(
        &self,
        store: &ParamStore,
        zero: &[Bone],
        j: &[Rigid],
        code: &[f64],
    ) -> PoseState {
        PoseState {
            bones: zero.iter().zip(j).map(|(b, j)| pose_bone(b, j)).collect(),
            delta_pre: self.skin.cond_preact(store, code),
            code: code.to_vec(),
        }
    }

    pub fn rest_state(&self, store: &ParamStore, codes: &LatentCodes) -> RestState {
        let zero = self.bones.zero_config(store);
        let code = codes.rest_code(store);
        let (body_out, body_tape) = self.body.forward(store, code, &[]);
        let j: Vec<Rigid> = body_out.chunks_exact(6).map(se3_from).collect();
        let j_inv = j.iter().map(Rigid::inverse).collect();
        let pose = self.pose_state(store, &zero, &j, code);
        RestState {
            zero,
            j,
            j_inv,
            pose,
            body_out,
            body_tape,
        }
    }

    pub fn frame_state(
        &self,
        store: &ParamStore,
        codes: &LatentCodes,
        rest: &RestState,
        frame: usize,
        g0: &Se3,
    ) -> FrameState {
        let root_code = codes.root_code(store, frame).to_vec();
        let (root_out, root_tape) = self.root.forward(store, &root_code, &[]);
        let delta_g = se3_from(&root_out);
        let g0 = g0.to_rigid();
        let g = delta_g.compose(&g0);
        let body_code = codes.body_code(store, frame);
        let (body_out, body_tape) = self.body.forward(store, body_code, &[]);
        let j: Vec<Rigid> = body_out.chunks_exact(6).map(se3_from).collect();
        let dj: Vec<Rigid> = j
            .iter()
            .zip(&rest.j_inv)
            .map(|(a, b)| a.compose(b))
            .collect();
        let dj_inv = dj.iter().map(Rigid::inverse).collect();
        let pose = self.pose_state(store, &rest.zero, &j, body_code);
        FrameState {
            frame,
            g0,
            g,
            g_inv: g.inverse(),
            dj,
            dj_inv,
            j,
            pose,
            delta_g,

            root_out,
            root_tape,
            body_out,
            body_tape,
        }
    }

    /// Backpropagates one frame's accumulated gradient into MLP_G, MLP_J,
    /// the MLP_Δ conditioning, the frame codes and the bones. Contributions
    /// to the rest transforms are added into `d_rest_j` and `d_zero`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_frame(
        &self,
        store: &ParamStore,
        codes: &LatentCodes,
        rest: &RestState,
        fs: &FrameState,
        fg: &FrameGrad,
        d_rest_j: &mut [RigidGrad],
        d_zero: &mut [BoneGrad],
        grads: &mut Grads,
    ) {
        let nb = self.num_bones();
        let code_len = codes.num_frames * POSE_CODE_DIM;
        let off = fs.frame * POSE_CODE_DIM;

        let mut dg = fg.g;
        dg += fs.g.inverse_vjp(&fg.g_inv);
        if !dg.is_zero() {
            let (d_delta, _) = fs.delta_g.compose_vjp(&fs.g0, &dg);
            let mut d_out = vec![0.0; 6];
            se3_vjp(&fs.root_out, &d_delta, &mut d_out);
            let (d_code, _) = self.root.backward(store, &fs.root_tape, &[], &d_out, grads);
            add_row(grads, codes.root, code_len, off, &d_code);
        }

        let mut d_body = vec![0.0; 6 * nb];
        for b in 0..nb {
            let mut d_dj = fg.dj[b];
            d_dj += fs.dj[b].inverse_vjp(&fg.dj_inv[b]);
            let (mut d_j, d_rinv) = fs.j[b].compose_vjp(&rest.j_inv[b], &d_dj);
            d_rest_j[b] += rest.j[b].inverse_vjp(&d_rinv);
            pose_bone_vjp(
                &rest.zero[b],
                &fs.j[b],
                &fs.pose.bones[b],
                &fg.pose.centers[b],
                &fg.pose.q[b],
                &mut d_j,
                &mut d_zero[b],
            );
            se3_vjp(
                &fs.body_out[6 * b..6 * b + 6],
                &d_j,
                &mut d_body[6 * b..6 * b + 6],
            );
        }
        let (mut d_code, _) = self
            .body
            .backward(store, &fs.body_tape, &[], &d_body, grads);
        let d_cond = self
            .skin
            .cond_backward(store, &fs.pose.code, &fg.pose.delta_pre, grads);
        for (a, b) in d_code.iter_mut().zip(&d_cond) {
            *a += b;
        }
        add_row(grads, codes.body, code_len, off, &d_code);
    }

    /// Backpropagates rest-pose gradients: `d_rest_j` (∂L/∂J*_b),
    /// `rest_pose` (posed rest bones and MLP_Δ term) and `d_zero`.
    pub fn backward_rest(
        &self,
        store: &ParamStore,
        codes: &LatentCodes,
        rest: &RestState,
        d_rest_j: &[RigidGrad],
        rest_pose: &PoseGrad,
        mut d_zero: Vec<BoneGrad>,
        grads: &mut Grads,
    ) {
        let nb = self.num_bones();
        let mut d_body = vec![0.0; 6 * nb];
        for b in 0..nb {
            let mut d_j = d_rest_j[b];
            pose_bone_vjp(
                &rest.zero[b],
                &rest.j[b],
                &rest.pose.bones[b],
                &rest_pose.centers[b],
                &rest_pose.q[b],
                &mut d_j,
                &mut d_zero[b],
            );
            se3_vjp(
                &rest.body_out[6 * b..6 * b + 6],
                &d_j,
                &mut d_body[6 * b..6 * b + 6],
            );
        }
        let (mut d_code, _) = self
            .body
            .backward(store, &rest.body_tape, &[], &d_body, grads);
        let d_cond = self
            .skin
            .cond_backward(store, &rest.pose.code, &rest_pose.delta_pre, grads);
        for (a, b) in d_code.iter_mut().zip(&d_cond) {
            *a += b;
        }
        add_row(grads, codes.rest, POSE_CODE_DIM, 0, &d_code);
        self.bones.backward(&rest.zero, &d_zero, grads);
    }

    /// Backpropagates a whole [`DeformGrad`] given the states it was
    /// accumulated against (`states[t]` must exist for every touched frame).
    pub fn backward_all(
        &self,
        store: &ParamStore,
        codes: &LatentCodes,
        rest: &RestState,
        states: &[Option<FrameState>],
        dg: &DeformGrad,
        grads: &mut Grads,
    ) {
        let nb = self.num_bones();
        let mut d_rest_j = vec![RigidGrad::default(); nb];
        let mut d_zero = vec![BoneGrad::default(); nb];
        for (t, fg) in dg.frames.iter().enumerate() {
            if let Some(fg) = fg {
                let fs = states[t].as_ref().expect("frame state for touched frame");
                self.backward_frame(
                    store,
                    codes,
                    rest,
                    fs,
                    fg,
                    &mut d_rest_j,
                    &mut d_zero,
                    grads,
                );
            }
        }
        self.backward_rest(store, codes, rest, &d_rest_j, &dg.rest, d_zero, grads);
    }
}
