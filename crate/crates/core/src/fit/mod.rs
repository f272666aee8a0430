//! The optimization driver: iteration budget, schedules, root-pose
//! initialization, the training loop with its logs and checkpoints, motion
//! retargeting and reconstruction evaluation.

mod eval;

pub use eval::{eval_reconstruction, extract_canonical, image_losses, EvalReport, FrameEval};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{FitConfig, RootInit};
use crate::embed::update_bounds_from_surface;
use crate::error::{Error, Result};
use crate::geom::{rodrigues, Rigid, Se3, Vec3};
use crate::model::Model;
use crate::nnet::{Adam, Group, Tensor};
use crate::objective::{
    evaluate, render_image, sample_pixels, ActiveRequest, LossReport, RenderView, StepSettings,
};
use crate::render::{write_ppm, Image};
use crate::synth::Dataset;

/// Object-to-camera translation of every initial root pose.
pub const INIT_TRANSLATION: [f64; 3] = [0.0, 0.0, 3.0];

/// `round(1000 · frames / (N^p + N^a)) · 1000`.
pub fn iteration_budget(num_frames: usize, uniform: usize, active: usize) -> usize {
    let per = (uniform + active).max(1) as f64;
    (1000.0 * num_frames as f64 / per).round() as usize * 1000
}

/// Explicit iteration count, or the budget clamped to the floor.
pub fn planned_iterations(cfg: &FitConfig, num_frames: usize) -> usize {
    if cfg.iterations > 0 {
        cfg.iterations
    } else {
        iteration_budget(num_frames, cfg.rays, cfg.active_rays).max(cfg.iteration_floor)
    }
}

/// β annealing, learning-rate decay, warm-up and the active-sampling switch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr_final_frac: f64,
    pub warmup_frac: f64,
}

impl Schedule {
    pub fn new(cfg: &FitConfig, total: usize) -> Schedule {
        Schedule {
            total,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            lr_final_frac: cfg.lr_final_frac,
            warmup_frac: cfg.warmup_frac,
        }
    }

    fn half(&self) -> usize {
        (self.total / 2).max(1)
    }

    /// Geometric from `beta_start` to `beta_end` over the first half.
    pub fn beta(&self, it: usize) -> f64 {
        let f = (it as f64 / self.half() as f64).min(1.0);
        self.beta_start * (self.beta_end / self.beta_start).powf(f)
    }

    /// Cosine decay from 1 to `lr_final_frac`.
    pub fn lr_factor(&self, it: usize) -> f64 {
        let f = (it as f64 / self.total.max(1) as f64).min(1.0);
        self.lr_final_frac
            + (1.0 - self.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }

    pub fn warmup(&self, it: usize) -> bool {
        (it as f64) < self.warmup_frac * self.total as f64
    }

    pub fn active(&self, it: usize) -> bool {
        it >= self.total / 2
    }
}

/// Per-frame initial root poses `G₀`. `NoisyTruth` rotates each ground-truth
/// rotation by a random angle up to `max_deg`; both modes use the fixed
/// translation [`INIT_TRANSLATION`].
pub fn init_root_poses<R: Rng>(
    data: &Dataset,
    mode: RootInit,
    max_deg: f64,
    rng: &mut R,
) -> Result<Vec<Se3>> {
    let t = Vec3::from(INIT_TRANSLATION);
    data.frames
        .iter()
        .enumerate()
        .map(|(i, f)| match mode {
            RootInit::Identity => Ok(Se3::new(Vec3::zeros(), t)),
            RootInit::NoisyTruth => {
                let gt = f.gt_root.ok_or_else(|| {
                    Error::Dataset(format!("frame {i} has no ground-truth root pose"))
                })?;
                let axis = loop {
                    let a = Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    );
                    if a.norm() > 1e-6 {
                        break a.normalize();
                    }
                };
                let angle = rng.gen::<f64>() * max_deg.to_radians();
                let r = rodrigues(&(axis * angle)) * gt.to_rigid().r;
                Ok(Se3::from_rigid(&Rigid::new(r, t)))
            }
        })
        .collect()
}

fn base_lr(cfg: &FitConfig, t: &Tensor) -> f64 {
    match t.group {
        Group::Network | Group::Uncertainty | Group::Camera => cfg.lr_network,
        Group::Code | Group::Bone | Group::Scalar => cfg.lr_code,
        Group::PixelEmbedding => cfg.lr_pixel,
        Group::Buffer => 0.0,
    }
}

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: LossReport,
    pub beta: f64,
    pub alpha: f64,
    pub lr_factor: f64,
    pub active: usize,
    pub warmup: bool,
    pub refreshed: bool,
}

impl StepReport {
    /// Deterministic `key=value` record for the metrics log.
    pub fn log_line(&self) -> String {
        format!(
            "iter={} beta={:.9e} alpha={:.9e} lr={:.6e} warmup={} active={}{} refresh={}",
            self.iteration,
            self.beta,
            self.alpha,
            self.lr_factor,
            self.warmup as u8,
            self.active,
            self.loss.log_fields(),
            self.refreshed as u8
        )
    }
}

/// Model, progress and sampler state of a run.
#[derive(Clone, Debug)]
pub struct FitState {
    pub model: Model,
    pub iteration: usize,
    pub total: usize,
    pub rng: ChaCha8Rng,
    seed: u64,
    /// Retargeting keeps the annealed β and the canonical bounds.
    pub retarget: bool,
}

impl FitState {
    /// Fresh state: initial root poses and model parameters drawn from
    /// `cfg.seed`.
    pub fn new(data: &Dataset, cfg: &FitConfig) -> Result<FitState> {
        data.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mode = if cfg.ablations.no_root_init {
            RootInit::Identity
        } else {
            cfg.root_init
        };
        let g0 = init_root_poses(data, mode, cfg.root_noise_deg, &mut rng)?;
        let model = Model::new(cfg, data, &g0, &mut rng)?;
        Ok(FitState {
            total: planned_iterations(cfg, data.num_frames()),
            model,
            iteration: 0,
            rng,
            seed: cfg.seed,
            retarget: false,
        })
    }

    /// A model for `driving` that shares every object tensor of `trained`
    /// and learns only the environment, root and body codes.
    pub fn retarget(
        trained: &Model,
        driving: &Dataset,
        iterations: usize,
        seed: u64,
    ) -> Result<FitState> {
        driving.validate()?;
        let cfg = trained.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if cfg.ablations.no_root_init {
            RootInit::Identity
        } else {
            cfg.root_init
        };
        let g0 = init_root_poses(driving, mode, cfg.root_noise_deg, &mut rng)?;
        let mut model = Model::new(&cfg, driving, &g0, &mut rng)?;
        let ids: Vec<_> = model
            .store
            .tensors()
            .map(|(id, t)| (id, t.name.clone()))
            .collect();
        for (id, name) in ids {
            if Model::is_shared(&name) {
                let src = trained
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("trained model lacks {name}")))?;
                let (a, b) = (trained.store.tensor(src), model.store.tensor(id));
                if a.shape != b.shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} vs {:?}",
                        a.shape, b.shape
                    )));
                }
                model.store.get_mut(id).copy_from_slice(&a.data);
            }
            let learn = matches!(name.as_str(), "code.env" | "code.root" | "code.body");
            model.store.set_frozen(id, !learn);
        }
        Ok(FitState {
            model,
            iteration: 0,
            total: iterations,
            rng,
            seed,
            retarget: true,
        })
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(&self.model.config, self.total)
    }

    /// Scheduled β of the current iteration.
    pub fn beta(&self) -> f64 {
        let sch = self.schedule();
        if self.retarget {
            sch.beta_end
        } else {
            sch.beta(self.iteration)
        }
    }

    /// Step settings of the current iteration.
    pub fn settings(&self) -> StepSettings {
        let warm = !self.retarget && self.schedule().warmup(self.iteration);
        StepSettings::from_config(&self.model.config, self.beta(), warm)
    }

    /// One sample → render → loss → backward → Adam iteration.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        let it = self.iteration;
        let sch = self.schedule();
        let cfg = self.model.config.clone();
        let s = self.settings();
        let warm = !self.retarget && sch.warmup(it);
        let model = &self.model;
        let score = |t: usize, x: usize, y: usize| model.uncertainty(t, x, y);
        let active =
            (sch.active(it) && !cfg.ablations.no_active && cfg.active_rays > 0).then(|| {
                ActiveRequest {
                    keep: cfg.active_rays,
                    candidates: cfg.active_candidates.max(cfg.active_rays),
                    score: &score,
                }
            });
        let samples = sample_pixels(data, cfg.rays, active, cfg.samples_per_ray, &mut self.rng);
        let (loss, grads) = evaluate(model, data, &samples, &s, true)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                iteration: it,
                detail: loss.log_fields().trim().to_string(),
            });
        }
        let report = StepReport {
            iteration: it,
            loss,
            beta: s.beta_schedule * model.beta_scale(),
            alpha: model.alpha(),
            lr_factor: sch.lr_factor(it),
            active: samples.num_active(),
            warmup: warm,
            refreshed: false,
        };
        let store = &mut self.model.store;
        store.zero_grads();
        store.accumulate(&grads.expect("gradients requested"));
        let hp = Adam {
            lr: report.lr_factor,
            ..Adam::default()
        };
        store.adam_step_with(&hp, |t| {
            if warm && t.name.starts_with("skin.") {
                0.0
            } else {
                base_lr(&cfg, t)
            }
        });
        if !self.model.store.is_frozen(self.model.pixels.id) {
            self.model.pixels.renormalize(&mut self.model.store);
        }
        self.iteration += 1;
        let refreshed = !self.retarget
            && cfg.refresh_every > 0
            && self.iteration % cfg.refresh_every == 0
            && self.refresh_bounds()?;
        Ok(StepReport {
            refreshed,
            ..report
        })
    }

    /// Re-fits the canonical bounds to the current zero level set, padded
    /// by `bounds_pad`. Keeps the old bounds when there is no surface.
    pub fn refresh_bounds(&mut self) -> Result<bool> {
        let cfg = &self.model.config;
        let (res, pad) = (cfg.mesh_resolution, cfg.bounds_pad);
        let mesh = match extract_canonical(&self.model, res) {
            Ok(m) => m,
            Err(Error::EmptySurface) => return Ok(false),
            Err(e) => return Err(e),
        };
        match update_bounds_from_surface(&mesh.vertices) {
            Ok(b) => {
                self.model.set_canonical_bounds(&b.padded(pad));
                Ok(true)
            }
            Err(Error::EmptySurface) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Checkpoint metadata: model layout plus progress and sampler state.
    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("fit.iteration".into(), self.iteration.to_string());
        m.insert("fit.total".into(), self.total.to_string());
        m.insert("fit.rng_seed".into(), self.seed.to_string());
        m.insert(
            "fit.rng_word_pos".into(),
            self.rng.get_word_pos().to_string(),
        );
        m.insert("fit.retarget".into(), self.retarget.to_string());
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, &self.meta())
    }

    /// Color rendering of the first frame from its training camera.
    pub fn preview(&self) -> Image {
        let view = RenderView {
            frame: 0,
            camera: self.model.camera(0),
            root: None,
        };
        let s = StepSettings::from_config(&self.model.config, self.beta(), false);
        render_image(&self.model, &view, self.model.config.samples_per_ray, &s).0
    }

    fn save_with_preview(&self, dir: &Path, name: &str) -> Result<()> {
        self.save(&dir.join(name))?;
        write_ppm(
            &dir.join(format!("preview-{:06}.ppm", self.iteration)),
            &self.preview(),
        )
    }

    /// Restores a state saved by [`FitState::save`] bit-exactly.
    pub fn load(path: &Path) -> Result<FitState> {
        let (model, meta) = Model::load(path)?;
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("bad metadata {k}"));
        let seed: u64 = get("fit.rng_seed")?
            .parse()
            .map_err(|_| bad("fit.rng_seed"))?;
        let pos: u128 = get("fit.rng_word_pos")?
            .parse()
            .map_err(|_| bad("fit.rng_word_pos"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(pos);
        Ok(FitState {
            iteration: get("fit.iteration")?
                .parse()
                .map_err(|_| bad("fit.iteration"))?,
            total: get("fit.total")?.parse().map_err(|_| bad("fit.total"))?,
            retarget: get("fit.retarget")?
                .parse()
                .map_err(|_| bad("fit.retarget"))?,
            model,
            rng,
            seed,
        })
    }
}

/// Checksum over the object tensors (see [`Model::is_shared`]).
pub fn shared_checksum(model: &Model) -> u64 {
    model.store.checksum(|t| Model::is_shared(&t.name))
}

/// Metrics and timing logs of a run directory. Wall-clock times go to their
/// own file so the metrics log stays reproducible.
struct RunLogs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunLogs {
    fn open(dir: &Path, append: bool) -> Result<RunLogs> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(RunLogs {
            metrics: open("metrics.log")?,
            timing: open("timing.log")?,
        })
    }
}

/// Where a run writes its logs and checkpoints.
#[derive(Clone, Copy, Debug)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Name of the final checkpoint inside `dir`.
    pub final_name: &'a str,
}

/// Runs `state` to its budget. With an output directory, writes
/// `metrics.log`, `timing.log`, periodic `ckpt-NNNNNN.ckpt` files and the
/// final checkpoint, each with a `preview-NNNNNN.ppm` rendering; on a non-finite loss the pre-step state is dumped to
/// `diverged.ckpt` and the error returned.
pub fn run(mut state: FitState, data: &Dataset, out: Option<RunOutput<'_>>) -> Result<FitState> {
    let mut logs = out
        .map(|o| RunLogs::open(o.dir, state.iteration > 0))
        .transpose()?;
    let every = state.model.config.checkpoint_every;
    while state.iteration < state.total {
        let t0 = Instant::now();
        let rep = match state.step(data) {
            Ok(r) => r,
            Err(e) => {
                if let (Error::DivergedLoss { .. }, Some(o)) = (&e, out) {
                    state.save(&o.dir.join("diverged.ckpt"))?;
                }
                return Err(e);
            }
        };
        if let Some(l) = &mut logs {
            writeln!(l.metrics, "{}", rep.log_line())?;
            writeln!(
                l.timing,
                "iter={} ms={:.3}",
                rep.iteration,
                t0.elapsed().as_secs_f64() * 1e3
            )?;
        }
        if let Some(o) = out {
            if every > 0 && state.iteration % every == 0 && state.iteration < state.total {
                state.save_with_preview(o.dir, &format!("ckpt-{:06}.ckpt", state.iteration))?;
            }
        }
    }
    if let (Some(l), Some(o)) = (&mut logs, out) {
        l.metrics.flush()?;
        l.timing.flush()?;
        state.save_with_preview(o.dir, o.final_name)?;
    }
    Ok(state)
}

/// Fits `data` from scratch.
pub fn fit(data: &Dataset, cfg: &FitConfig, out: Option<RunOutput<'_>>) -> Result<FitState> {
    run(FitState::new(data, cfg)?, data, out)
}
