//! Flat `key = value` run configuration. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::canonical::CanonicalConfig;
use crate::error::{Error, Result};
use crate::nnet::Activation;
use crate::warp::WarpConfig;

/// Per-term loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub sil: f64,
    pub flow: f64,
    pub matching: f64,
    pub cycle_2d: f64,
    pub cycle_3d: f64,
    pub uncertainty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 1.0,
            sil: 1.0,
            flow: 0.5,
            matching: 0.1,
            cycle_2d: 0.1,
            cycle_3d: 0.1,
            uncertainty: 1.0,
        }
    }
}

/// Diagnostic switches; `true` disables the component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_feature: bool,
    pub no_flow: bool,
    pub no_active: bool,
    pub no_root_init: bool,
    pub no_delta: bool,
    pub no_gauss: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "no-feature",
        "no-flow",
        "no-active",
        "no-root-init",
        "no-delta",
        "no-gauss",
    ];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no-feature" => &mut self.no_feature,
            "no-flow" => &mut self.no_flow,
            "no-active" => &mut self.no_active,
            "no-root-init" => &mut self.no_root_init,
            "no-delta" => &mut self.no_delta,
            "no-gauss" => &mut self.no_gauss,
            _ => return Err(Error::Config(format!("unknown ablation {name:?}"))),
        };
        *flag = true;
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [
            self.no_feature,
            self.no_flow,
            self.no_active,
            self.no_root_init,
            self.no_delta,
            self.no_gauss,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect()
    }

    fn parse(s: &str) -> Result<Ablations> {
        let mut a = Ablations::default();
        for name in s
            .split(',')
            .map(str::trim)
            .filter(|n| !n.is_empty() && *n != "none")
        {
            a.enable(name)?;
        }
        Ok(a)
    }
}

/// How the per-frame initial root poses `G₀` are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RootInit {
    /// Ground-truth rotations perturbed by up to `root_noise_deg`.
    NoisyTruth,
    /// `G₀ = (I, (0, 0, 3))` for every frame.
    Identity,
}

/// Architecture, sampling, schedule and loss settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub canonical: CanonicalConfig,
    pub warp: WarpConfig,
    pub unc_hidden: Vec<usize>,
    pub unc_freqs: usize,
    pub code_std: f64,
    pub grid_size: usize,
    /// Half extent of the initial canonical bounding cube.
    pub init_bound: f64,
    pub alpha_init: f64,
    pub learn_focal: bool,

    pub rays: usize,
    pub active_rays: usize,
    pub active_candidates: usize,
    pub samples_per_ray: usize,
    /// Samples with visibility below this skip color and 3D-cycle work.
    pub tau_eps: f64,
    /// Ray marching stops once transmittance falls below this.
    pub trans_cutoff: f64,

    /// Explicit iteration count; 0 derives it from the frame count.
    pub iterations: usize,
    pub iteration_floor: usize,
    pub lr_network: f64,
    pub lr_code: f64,
    pub lr_pixel: f64,
    pub lr_final_frac: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub warmup_frac: f64,
    pub refresh_every: usize,
    pub mesh_resolution: usize,
    pub bounds_pad: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub root_init: RootInit,
    pub root_noise_deg: f64,

    pub weights: LossWeights,
    pub ablations: Ablations,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            canonical: CanonicalConfig::default(),
            warp: WarpConfig::default(),
            unc_hidden: vec![128; 4],
            unc_freqs: 4,
            code_std: 0.1,
            grid_size: 20,
            init_bound: 1.0,
            alpha_init: 10.0,
            learn_focal: false,
            rays: 8192,
            active_rays: 8192,
            active_candidates: 32768,
            samples_per_ray: 128,
            tau_eps: 1e-5,
            trans_cutoff: 1e-4,
            iterations: 0,
            iteration_floor: 2000,
            lr_network: 5e-4,
            lr_code: 5e-3,
            lr_pixel: 5e-4,
            lr_final_frac: 0.1,
            beta_start: 0.1,
            beta_end: 0.01,
            warmup_frac: 0.1,
            refresh_every: 200,
            mesh_resolution: 48,
            bounds_pad: 0.1,
            checkpoint_every: 0,
            seed: 0,
            root_init: RootInit::NoisyTruth,
            root_noise_deg: 15.0,
            weights: LossWeights::default(),
            ablations: Ablations::default(),
        }
    }
}

impl FitConfig {
    /// Very small networks and batches, for tests and benchmarks.
    pub fn tiny() -> FitConfig {
        let mut c = FitConfig::default();
        c.canonical.sdf_hidden = vec![8, 8];
        c.canonical.color_hidden = vec![8];
        c.canonical.embed_hidden = vec![8];
        c.canonical.point_freqs = 2;
        c.canonical.dir_freqs = 1;
        c.warp.bones = 3;
        c.warp.pose_hidden = vec![8];
        c.warp.skin_hidden = vec![8];
        c.warp.skin_freqs = 2;
        c.unc_hidden = vec![8];
        c.unc_freqs = 1;
        c.grid_size = 4;
        c.init_bound = 0.7;
        c.rays = 16;
        c.active_rays = 4;
        c.active_candidates = 32;
        c.samples_per_ray = 8;
        c.mesh_resolution = 12;
        c.iterations = 10;
        c.refresh_every = 5;
        c
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl FitConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let c = &mut self.canonical;
        let w = &mut self.warp;
        let lw = &mut self.weights;
        match key {
            "sdf_hidden" => c.sdf_hidden = parse_list(key, v)?,
            "color_hidden" => c.color_hidden = parse_list(key, v)?,
            "embed_hidden" => c.embed_hidden = parse_list(key, v)?,
            "point_freqs" => c.point_freqs = parse_num(key, v)?,
            "dir_freqs" => c.dir_freqs = parse_num(key, v)?,
            "activation" => {
                let a = Activation::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown activation {v:?}")))?;
                c.activation = a;
                w.activation = a;
            }
            "init_radius" => c.init_radius = parse_num(key, v)?,
            "bones" => w.bones = parse_num(key, v)?,
            "pose_hidden" => w.pose_hidden = parse_list(key, v)?,
            "skin_hidden" => w.skin_hidden = parse_list(key, v)?,
            "skin_freqs" => w.skin_freqs = parse_num(key, v)?,
            "bone_radius" => w.bone_radius = parse_num(key, v)?,
            "bone_precision" => w.bone_precision = parse_num(key, v)?,
            "unc_hidden" => self.unc_hidden = parse_list(key, v)?,
            "unc_freqs" => self.unc_freqs = parse_num(key, v)?,
            "code_std" => self.code_std = parse_num(key, v)?,
            "grid_size" => self.grid_size = parse_num(key, v)?,
            "init_bound" => self.init_bound = parse_num(key, v)?,
            "alpha_init" => self.alpha_init = parse_num(key, v)?,
            "learn_focal" => self.learn_focal = parse_bool(key, v)?,
            "rays" => self.rays = parse_num(key, v)?,
            "active_rays" => self.active_rays = parse_num(key, v)?,
            "active_candidates" => self.active_candidates = parse_num(key, v)?,
            "samples_per_ray" => self.samples_per_ray = parse_num(key, v)?,
            "tau_eps" => self.tau_eps = parse_num(key, v)?,
            "trans_cutoff" => self.trans_cutoff = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "iteration_floor" => self.iteration_floor = parse_num(key, v)?,
            "lr_network" => self.lr_network = parse_num(key, v)?,
            "lr_code" => self.lr_code = parse_num(key, v)?,
            "lr_pixel" => self.lr_pixel = parse_num(key, v)?,
            "lr_final_frac" => self.lr_final_frac = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "warmup_frac" => self.warmup_frac = parse_num(key, v)?,
            "refresh_every" => self.refresh_every = parse_num(key, v)?,
            "mesh_resolution" => self.mesh_resolution = parse_num(key, v)?,
            "bounds_pad" => self.bounds_pad = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "root_init" => {
                self.root_init = match v {
                    "noisy" => RootInit::NoisyTruth,
                    "identity" => RootInit::Identity,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected noisy or identity, got {v:?}"
                        )))
                    }
                }
            }
            "root_noise_deg" => self.root_noise_deg = parse_num(key, v)?,
            "w_rgb" => lw.rgb = parse_num(key, v)?,
            "w_sil" => lw.sil = parse_num(key, v)?,
            "w_flow" => lw.flow = parse_num(key, v)?,
            "w_match" => lw.matching = parse_num(key, v)?,
            "w_cycle_2d" => lw.cycle_2d = parse_num(key, v)?,
            "w_cycle_3d" => lw.cycle_3d = parse_num(key, v)?,
            "w_uncertainty" => lw.uncertainty = parse_num(key, v)?,
            "ablate" => self.ablations = Ablations::parse(v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.canonical;
        let w = &self.warp;
        let lw = &self.weights;
        let ablate = self.ablations.names().join(",");
        vec![
            ("sdf_hidden", list(&c.sdf_hidden)),
            ("color_hidden", list(&c.color_hidden)),
            ("embed_hidden", list(&c.embed_hidden)),
            ("point_freqs", c.point_freqs.to_string()),
            ("dir_freqs", c.dir_freqs.to_string()),
            ("activation", c.activation.name()),
            ("init_radius", c.init_radius.to_string()),
            ("bones", w.bones.to_string()),
            ("pose_hidden", list(&w.pose_hidden)),
            ("skin_hidden", list(&w.skin_hidden)),
            ("skin_freqs", w.skin_freqs.to_string()),
            ("bone_radius", w.bone_radius.to_string()),
            ("bone_precision", w.bone_precision.to_string()),
            ("unc_hidden", list(&self.unc_hidden)),
            ("unc_freqs", self.unc_freqs.to_string()),
            ("code_std", self.code_std.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("init_bound", self.init_bound.to_string()),
            ("alpha_init", self.alpha_init.to_string()),
            ("learn_focal", self.learn_focal.to_string()),
            ("rays", self.rays.to_string()),
            ("active_rays", self.active_rays.to_string()),
            ("active_candidates", self.active_candidates.to_string()),
            ("samples_per_ray", self.samples_per_ray.to_string()),
            ("tau_eps", self.tau_eps.to_string()),
            ("trans_cutoff", self.trans_cutoff.to_string()),
            ("iterations", self.iterations.to_string()),
            ("iteration_floor", self.iteration_floor.to_string()),
            ("lr_network", self.lr_network.to_string()),
            ("lr_code", self.lr_code.to_string()),
            ("lr_pixel", self.lr_pixel.to_string()),
            ("lr_final_frac", self.lr_final_frac.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("refresh_every", self.refresh_every.to_string()),
            ("mesh_resolution", self.mesh_resolution.to_string()),
            ("bounds_pad", self.bounds_pad.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            (
                "root_init",
                match self.root_init {
                    RootInit::NoisyTruth => "noisy".into(),
                    RootInit::Identity => "identity".into(),
                },
            ),
            ("root_noise_deg", self.root_noise_deg.to_string()),
            ("w_rgb", lw.rgb.to_string()),
            ("w_sil", lw.sil.to_string()),
            ("w_flow", lw.flow.to_string()),
            ("w_match", lw.matching.to_string()),
            ("w_cycle_2d", lw.cycle_2d.to_string()),
            ("w_cycle_3d", lw.cycle_3d.to_string()),
            ("w_uncertainty", lw.uncertainty.to_string()),
            (
                "ablate",
                if ablate.is_empty() {
                    "none".into()
                } else {
                    ablate
                },
            ),
        ]
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<FitConfig> {
        let mut cfg = FitConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<FitConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let positive = [
            ("code_std", self.code_std),
            ("init_bound", self.init_bound),
            ("alpha_init", self.alpha_init),
            ("lr_network", self.lr_network),
            ("lr_code", self.lr_code),
            ("lr_pixel", self.lr_pixel),
            ("lr_final_frac", self.lr_final_frac),
            ("beta_start", self.beta_start),
            ("beta_end", self.beta_end),
            ("init_radius", self.canonical.init_radius),
            ("bone_precision", self.warp.bone_precision),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("tau_eps", self.tau_eps),
            ("trans_cutoff", self.trans_cutoff),
            ("bounds_pad", self.bounds_pad),
            ("root_noise_deg", self.root_noise_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        let lw = &self.weights;
        let weights = [
            lw.rgb,
            lw.sil,
            lw.flow,
            lw.matching,
            lw.cycle_2d,
            lw.cycle_3d,
            lw.uncertainty,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be non-negative");
        }
        if self.rays == 0 || self.samples_per_ray < 2 {
            return bad("rays must be positive and samples_per_ray at least 2");
        }
        if self.active_rays > self.active_candidates {
            return bad("active_rays exceeds active_candidates");
        }
        if self.warp.bones == 0 {
            return bad("bones must be positive");
        }
        if self.grid_size < 2 || self.mesh_resolution < 8 {
            return bad("grid_size must be at least 2 and mesh_resolution at least 8");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if self.refresh_every == 0 || self.iteration_floor == 0 {
            return bad("refresh_every and iteration_floor must be positive");
        }
        Ok(())
    }
}
