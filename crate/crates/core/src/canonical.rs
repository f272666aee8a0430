//! Time-invariant canonical fields: signed distance, color and the 16-D
//! canonical embedding, plus the SDF-to-density transfer.

use rand::Rng;

use crate::error::Result;
use crate::geom::Vec3;
use crate::nnet::{
    encoded_width, positional_encode, positional_encode_backward, Activation, Grads, Group, Init,
    Mlp, MlpSpec, MlpTape, ParamStore, ENV_CODE_DIM,
};

pub const EMBED_DIM: usize = 16;

/// Laplace CDF of `−sdf` with scale `beta`.
#[inline]
pub fn sdf_to_density(sdf: f64, beta: f64) -> f64 {
    let e = 0.5 * (-sdf.abs() / beta).exp();
    if sdf >= 0.0 {
        e
    } else {
        1.0 - e
    }
}

/// `(∂σ/∂sdf, ∂σ/∂β)`.
#[inline]
pub fn density_grad(sdf: f64, beta: f64) -> (f64, f64) {
    let e = 0.5 * (-sdf.abs() / beta).exp();
    (-e / beta, e * sdf / (beta * beta))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y / |y|` and its adjoint. Zero vectors stay zero.
pub fn normalize(y: &[f64]) -> Vec<f64> {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; y.len()];
    }
    y.iter().map(|v| v / n).collect()
}

pub fn normalize_vjp(y: &[f64], d_unit: &[f64]) -> Vec<f64> {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; y.len()];
    }
    let u: Vec<f64> = y.iter().map(|v| v / n).collect();
    let proj: f64 = u.iter().zip(d_unit).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(d_unit)
        .map(|(ui, di)| (di - ui * proj) / n)
        .collect()
}

/// `n` near-uniform points on the sphere of `radius` (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalConfig {
    pub sdf_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub embed_hidden: Vec<usize>,
    pub point_freqs: usize,
    pub dir_freqs: usize,
    pub activation: Activation,
    pub init_radius: f64,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        CanonicalConfig {
            sdf_hidden: vec![128; 5],
            color_hidden: vec![128; 5],
            embed_hidden: vec![128; 5],
            point_freqs: 10,
            dir_freqs: 4,
            activation: Activation::Softplus(100.0),
            init_radius: 0.3,
        }
    }
}

impl CanonicalConfig {
    fn specs(&self) -> (MlpSpec, MlpSpec, MlpSpec) {
        let a = self.activation;
        let sdf = MlpSpec::new(3, &self.sdf_hidden, 1, a).with_freqs(self.point_freqs);
        let color = MlpSpec::new(3, &self.color_hidden, 3, a)
            .with_freqs(self.point_freqs)
            .with_cond(encoded_width(3, self.dir_freqs) + ENV_CODE_DIM);
        let embed = MlpSpec::new(3, &self.embed_hidden, EMBED_DIM, a).with_freqs(self.point_freqs);
        (sdf, color, embed)
    }
}

/// The three canonical networks.
#[derive(Clone, Debug)]
pub struct Canonical {
    pub sdf: Mlp,
    pub color: Mlp,
    pub embed: Mlp,
    pub dir_freqs: usize,
}

/// Record of one embedding evaluation.
#[derive(Clone, Debug)]
pub struct EmbedTape {
    pub unit: Vec<f64>,
    raw: Vec<f64>,
    tape: MlpTape,
}

impl Canonical {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &CanonicalConfig,
        rng: &mut R,
    ) -> Result<Canonical> {
        let (s, c, e) = cfg.specs();
        let sphere = Init::Sphere {
            radius: cfg.init_radius,
        };
        let canonical = Canonical {
            sdf: Mlp::register(store, "sdf", s, Group::Network, sphere, rng)?,
            color: Mlp::register(store, "color", c, Group::Network, Init::Kaiming, rng)?,
            embed: Mlp::register(store, "embed", e, Group::Network, Init::Kaiming, rng)?,
            dir_freqs: cfg.dir_freqs,
        };
        canonical.center_level_set(store, cfg.init_radius);
        Ok(canonical)
    }

    /// Refits the SDF output layer by ridge regression so the network
    /// matches `|x| − radius` on samples spanning the unit ball.
    fn center_level_set(&self, store: &mut ParamStore, radius: f64) {
        let mut pts = Vec::new();
        for (k, shell) in [0.05, 0.15, 0.25, 0.3, 0.35, 0.5, 0.75, 1.0]
            .iter()
            .enumerate()
        {
            let n = if k == 3 { 512 } else { 128 };
            pts.extend(fibonacci_sphere(n, radius / 0.3 * shell));
        }
        let pre = self.sdf_preact(store);
        let (w_id, b_id) = self.sdf.output_layer();
        let width = store.get(w_id).len();
        let dim = width + 1;
        let mut ata = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut atb = nalgebra::DVector::<f64>::zeros(dim);
        for p in &pts {
            let tape = self.sdf.forward_pre(store, p.as_slice(), &pre);
            let mut f = nalgebra::DVector::<f64>::from_element(dim, 1.0);
            f.rows_mut(0, width)
                .copy_from_slice(self.sdf.last_hidden(&tape));
            ata += &f * f.transpose();
            atb += &f * (p.norm() - radius);
        }
        let ridge = 1e-8 * ata.trace() / dim as f64;
        for i in 0..dim {
            ata[(i, i)] += ridge;
        }
        if let Some(sol) = ata.cholesky().map(|c| c.solve(&atb)) {
            store
                .get_mut(w_id)
                .copy_from_slice(sol.rows(0, width).as_slice());
            store.get_mut(b_id)[0] = sol[width];
        }
    }

    pub fn attach(store: &ParamStore, cfg: &CanonicalConfig) -> Result<Canonical> {
        let (s, c, e) = cfg.specs();
        Ok(Canonical {
            sdf: Mlp::attach(store, "sdf", s)?,
            color: Mlp::attach(store, "color", c)?,
            embed: Mlp::attach(store, "embed", e)?,
            dir_freqs: cfg.dir_freqs,
        })
    }

    pub fn eval_sdf(&self, store: &ParamStore, x: &Vec3) -> f64 {
        self.sdf.forward(store, x.as_slice(), &[]).0[0]
    }

    pub fn sdf_tape(&self, store: &ParamStore, x: &Vec3, pre: &[f64]) -> (f64, MlpTape) {
        let tape = self.sdf.forward_pre(store, x.as_slice(), pre);
        (self.sdf.output(&tape)[0], tape)
    }

    /// First-layer bias of the SDF network (it has no conditioning).
    pub fn sdf_preact(&self, store: &ParamStore) -> Vec<f64> {
        self.sdf.cond_preact(store, &[])
    }

    /// Accumulates parameter gradients (including the first-layer bias) and
    /// returns ∂L/∂X*.
    pub fn sdf_backward(
        &self,
        store: &ParamStore,
        tape: &MlpTape,
        d_sdf: f64,
        grads: &mut Grads,
    ) -> Vec3 {
        let mut dx = [0.0; 3];
        let d_pre = self
            .sdf
            .backward_pre(store, tape, &[d_sdf], grads, Some(&mut dx));
        self.sdf.cond_backward(store, &[], &d_pre, grads);
        Vec3::from(dx)
    }

    /// Conditioning vector `[PE(v), ω_e]` of the color network.
    pub fn color_cond(&self, view_dir: &Vec3, env: &[f64]) -> Vec<f64> {
        let mut c = positional_encode(view_dir.as_slice(), self.dir_freqs);
        c.extend_from_slice(env);
        c
    }

    pub fn color_preact(&self, store: &ParamStore, cond: &[f64]) -> Vec<f64> {
        self.color.cond_preact(store, cond)
    }

    pub fn color_tape(&self, store: &ParamStore, x: &Vec3, pre: &[f64]) -> ([f64; 3], MlpTape) {
        let tape = self.color.forward_pre(store, x.as_slice(), pre);
        let o = self.color.output(&tape);
        ([sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])], tape)
    }

    pub fn eval_color(
        &self,
        store: &ParamStore,
        x: &Vec3,
        view_dir: &Vec3,
        env: &[f64],
    ) -> [f64; 3] {
        let pre = self.color_preact(store, &self.color_cond(view_dir, env));
        self.color_tape(store, x, &pre).0
    }

    /// Returns ∂L/∂X* and accumulates ∂L/∂pre0 into `d_pre`.
    pub fn color_backward(
        &self,
        store: &ParamStore,
        tape: &MlpTape,
        rgb: &[f64; 3],
        d_rgb: &[f64; 3],
        d_pre: &mut [f64],
        grads: &mut Grads,
    ) -> Vec3 {
        let d_logit: Vec<f64> = (0..3).map(|k| d_rgb[k] * rgb[k] * (1.0 - rgb[k])).collect();
        let mut dx = [0.0; 3];
        let dp = self
            .color
            .backward_pre(store, tape, &d_logit, grads, Some(&mut dx));
        for (a, b) in d_pre.iter_mut().zip(&dp) {
            *a += b;
        }
        Vec3::from(dx)
    }

    /// Completes the color backward pass for one conditioning vector.
    /// Returns `(∂L/∂v, ∂L/∂ω_e)`.
    pub fn color_cond_backward(
        &self,
        store: &ParamStore,
        cond: &[f64],
        d_pre: &[f64],
        grads: &mut Grads,
    ) -> (Vec3, Vec<f64>) {
        let d_cond = self.color.cond_backward(store, cond, d_pre, grads);
        let w = encoded_width(3, self.dir_freqs);
        let mut dv = [0.0; 3];
        positional_encode_backward(&cond[..w], &d_cond[..w], 3, &mut dv);
        (Vec3::from(dv), d_cond[w..].to_vec())
    }

    pub fn eval_embedding(&self, store: &ParamStore, x: &Vec3) -> Vec<f64> {
        normalize(&self.embed.forward(store, x.as_slice(), &[]).0)
    }

    pub fn embedding_tape(&self, store: &ParamStore, x: &Vec3, pre: &[f64]) -> EmbedTape {
        let tape = self.embed.forward_pre(store, x.as_slice(), pre);
        let raw = self.embed.output(&tape).to_vec();
        EmbedTape {
            unit: normalize(&raw),
            raw,
            tape,
        }
    }

    /// Returns ∂L/∂X* and accumulates ∂L/∂pre0 into `d_pre`.
    pub fn embedding_backward(
        &self,
        store: &ParamStore,
        rec: &EmbedTape,
        d_unit: &[f64],
        d_pre: &mut [f64],
        grads: &mut Grads,
    ) -> Vec3 {
        let d_raw = normalize_vjp(&rec.raw, d_unit);
        let mut dx = [0.0; 3];
        let dp = self
            .embed
            .backward_pre(store, &rec.tape, &d_raw, grads, Some(&mut dx));
        for (a, b) in d_pre.iter_mut().zip(&dp) {
            *a += b;
        }
        Vec3::from(dx)
    }
}
