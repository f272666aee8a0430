//! The full learnable model: canonical fields, deformation, codes, pixel
//! embeddings, the uncertainty network and per-video cameras.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::canonical::Canonical;
use crate::config::FitConfig;
use crate::embed::{CanonicalGrid, PixelEmbeddings};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Camera, Se3, Vec3};
use crate::nnet::{
    load_checkpoint, save_checkpoint, Activation, Group, Init, LatentCodes, Mlp, MlpSpec, ParamId,
    ParamStore,
};
use crate::synth::Dataset;
use crate::warp::{Deformer, FrameState, RestState};

/// Everything needed to render and warp, plus the frame layout it was
/// built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: FitConfig,
    pub store: ParamStore,
    pub canonical: Canonical,
    pub deformer: Deformer,
    pub codes: LatentCodes,
    pub pixels: PixelEmbeddings,
    pub unc: Mlp,
    pub beta_offset: ParamId,
    pub log_alpha: ParamId,
    /// `[videos, 2]` focal lengths.
    pub focal: ParamId,
    /// `[videos, 2]` principal points.
    pub principal: ParamId,
    /// `[frames, 6]` initial root poses `G₀`.
    pub root_init: ParamId,
    /// `[2, 3]` canonical bounds.
    pub bounds: ParamId,
    pub width: usize,
    pub height: usize,
    pub video_frames: Vec<usize>,
    video_of: Vec<usize>,
}

fn unc_spec(cfg: &FitConfig) -> MlpSpec {
    MlpSpec::new(3, &cfg.unc_hidden, 1, Activation::Relu).with_freqs(cfg.unc_freqs)
}

impl Model {
    /// Fresh model for `data` with initial root poses `g0` (one per frame).
    pub fn new<R: Rng>(cfg: &FitConfig, data: &Dataset, g0: &[Se3], rng: &mut R) -> Result<Model> {
        cfg.validate()?;
        data.validate()?;
        if g0.len() != data.num_frames() {
            return Err(Error::SizeMismatch(format!(
                "{} initial root poses for {} frames",
                g0.len(),
                data.num_frames()
            )));
        }
        let mut store = ParamStore::new();
        let canonical = Canonical::register(&mut store, &cfg.canonical, rng)?;
        let deformer = Deformer::register(&mut store, &cfg.warp, rng)?;
        let codes = LatentCodes::register(
            &mut store,
            "code",
            data.num_videos(),
            data.num_frames(),
            cfg.code_std,
            rng,
        )?;
        let feats: Vec<_> = data.frames.iter().map(|f| &f.features).collect();
        let pixels = PixelEmbeddings::init(&mut store, &feats, data.width, data.height)?;
        let unc = Mlp::register(
            &mut store,
            "unc",
            unc_spec(cfg),
            Group::Uncertainty,
            Init::Kaiming,
            rng,
        )?;
        let beta_offset = store.add_zeros("beta.log_offset", &[1], Group::Scalar)?;
        let log_alpha = store.add("alpha.log", &[1], Group::Scalar, vec![cfg.alpha_init.ln()])?;
        let mut focal = Vec::new();
        let mut principal = Vec::new();
        for v in 0..data.num_videos() {
            let cam = data.frames[data.frame_id(v, 0)].camera;
            focal.extend([cam.fx, cam.fy]);
            principal.extend([cam.cx, cam.cy]);
        }
        let nv = data.num_videos();
        let focal = store.add("camera.focal", &[nv, 2], Group::Camera, focal)?;
        let principal = store.add("camera.principal", &[nv, 2], Group::Buffer, principal)?;
        let init: Vec<f64> = g0.iter().flat_map(|g| g.to_array()).collect();
        let root_init = store.add("buffer.root_init", &[g0.len(), 6], Group::Buffer, init)?;
        let b = Aabb::cube(cfg.init_bound);
        let bounds = store.add(
            "buffer.bounds",
            &[2, 3],
            Group::Buffer,
            vec![b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z],
        )?;
        let mut model = Model {
            config: cfg.clone(),
            store,
            canonical,
            deformer,
            codes,
            pixels,
            unc,
            beta_offset,
            log_alpha,
            focal,
            principal,
            root_init,
            bounds,
            width: data.width,
            height: data.height,
            video_frames: data.video_frames.clone(),
            video_of: Vec::new(),
        };
        model.finish();
        let focal = model.focal;
        model.store.set_frozen(focal, !cfg.learn_focal);
        if cfg.ablations.no_delta {
            for id in model.deformer.skin.param_ids() {
                model.store.set_frozen(id, true);
            }
        }
        Ok(model)
    }

    /// Frame-to-video table and the skinning switches. Frozen flags travel
    /// with the parameters.
    fn finish(&mut self) {
        self.video_of = self
            .video_frames
            .iter()
            .enumerate()
            .flat_map(|(v, &n)| std::iter::repeat(v).take(n))
            .collect();
        self.deformer.use_delta = !self.config.ablations.no_delta;
        self.deformer.use_gauss = !self.config.ablations.no_gauss;
    }

    /// Rebuilds a model from a stored parameter set and its metadata.
    pub fn from_parts(store: ParamStore, meta: &BTreeMap<String, String>) -> Result<Model> {
        let mut cfg = FitConfig::default();
        for (k, v) in meta {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata {k}")))
        };
        let video_frames = get("data.video_frames")?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Checkpoint("bad video table".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Model {
            canonical: Canonical::attach(&store, &cfg.canonical)?,
            deformer: Deformer::attach(&store, &cfg.warp)?,
            codes: LatentCodes::attach(&store, "code")?,
            pixels: PixelEmbeddings::attach(&store)?,
            unc: Mlp::attach(&store, "unc", unc_spec(&cfg))?,
            beta_offset: store.require("beta.log_offset")?,
            log_alpha: store.require("alpha.log")?,
            focal: store.require("camera.focal")?,
            principal: store.require("camera.principal")?,
            root_init: store.require("buffer.root_init")?,
            bounds: store.require("buffer.bounds")?,
            width: num("data.width")?,
            height: num("data.height")?,
            video_frames,
            video_of: Vec::new(),
            config: cfg,
            store,
        };
        if model.video_frames.iter().sum::<usize>() != model.codes.num_frames {
            return Err(Error::Checkpoint(
                "video table does not match the codes".into(),
            ));
        }
        model.finish();
        Ok(model)
    }

    /// Configuration and frame layout as checkpoint metadata.
    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in self.config.entries() {
            m.insert(format!("config.{k}"), v);
        }
        m.insert("data.width".into(), self.width.to_string());
        m.insert("data.height".into(), self.height.to_string());
        let vf: Vec<String> = self.video_frames.iter().map(usize::to_string).collect();
        m.insert("data.video_frames".into(), vf.join(","));
        m
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = self.meta();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_checkpoint(path, &self.store, &meta)
    }

    /// Loads a checkpoint; returns the model and the full metadata.
    pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
        let (store, meta) = load_checkpoint(path)?;
        let model = Model::from_parts(store, &meta)?;
        Ok((model, meta))
    }

    pub fn num_frames(&self) -> usize {
        self.codes.num_frames
    }

    pub fn num_videos(&self) -> usize {
        self.video_frames.len()
    }

    pub fn video_of(&self, t: usize) -> usize {
        self.video_of[t]
    }

    pub fn camera(&self, t: usize) -> Camera {
        let v = self.video_of(t);
        let f = &self.store.get(self.focal)[2 * v..2 * v + 2];
        let p = &self.store.get(self.principal)[2 * v..2 * v + 2];
        Camera {
            fx: f[0],
            fy: f[1],
            cx: p[0],
            cy: p[1],
            width: self.width,
            height: self.height,
        }
    }

    pub fn g0(&self, t: usize) -> Se3 {
        Se3::from_slice(&self.store.get(self.root_init)[6 * t..6 * t + 6])
    }

    pub fn canonical_bounds(&self) -> Aabb {
        let b = self.store.get(self.bounds);
        Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
    }

    pub fn set_canonical_bounds(&mut self, b: &Aabb) {
        let id = self.bounds;
        self.store
            .get_mut(id)
            .copy_from_slice(&[b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]);
    }

    /// `exp(offset)`, the learnable factor on the scheduled β.
    pub fn beta_scale(&self) -> f64 {
        self.store.get(self.beta_offset)[0].exp()
    }

    pub fn alpha(&self) -> f64 {
        self.store.get(self.log_alpha)[0].exp()
    }

    pub fn rest_state(&self) -> RestState {
        self.deformer.rest_state(&self.store, &self.codes)
    }

    pub fn frame_state(&self, rest: &RestState, t: usize) -> FrameState {
        self.deformer
            .frame_state(&self.store, &self.codes, rest, t, &self.g0(t))
    }

    pub fn grid(&self) -> Result<CanonicalGrid> {
        CanonicalGrid::refresh(
            &self.canonical,
            &self.store,
            self.canonical_bounds(),
            self.config.grid_size,
        )
    }

    /// Predicted rgb error at pixel `(x, y)` of frame `t`.
    pub fn uncertainty(&self, t: usize, x: usize, y: usize) -> f64 {
        let input = self.unc_input(t, x, y);
        self.unc.forward(&self.store, &input, &[]).0[0]
    }

    pub(crate) fn unc_input(&self, t: usize, x: usize, y: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) / self.width as f64,
            (y as f64 + 0.5) / self.height as f64,
            (t as f64 + 0.5) / self.num_frames() as f64,
        ]
    }

    /// Tensors describing the object itself rather than one sequence: not
    /// the frame and video codes, pixel embeddings, initial root poses or
    /// cameras.
    pub fn is_shared(name: &str) -> bool {
        !matches!(
            name,
            "code.env" | "code.root" | "code.body" | "pixel_embed" | "buffer.root_init"
        ) && !name.starts_with("camera.")
    }
}
