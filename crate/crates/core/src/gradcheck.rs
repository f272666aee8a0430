//! Central finite-difference checks of accumulated parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{FitConfig, LossWeights};
use crate::error::Result;
use crate::geom::Se3;
use crate::model::Model;
use crate::nnet::{Grads, Group, Mlp, ParamId, ParamStore};
use crate::objective::{evaluate, PixelSample, SampleSet, StepSettings};
use crate::synth::{Dataset, SceneScript, FLOW_OFFSETS};

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if rel >= self.max_rel {
            self.max_rel = rel;
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// Compares `store.grad(id)` against central differences of `loss` for
/// `per_tensor` random entries of each tensor in `ids`.
pub fn check_params<R: Rng>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    h: f64,
    floor: f64,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradReport {
    let mut rep = GradReport::default();
    for &id in ids {
        let n = store.get(id).len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let analytic = store.grad(id)[i];
            let orig = store.get(id)[i];
            store.get_mut(id)[i] = orig + h;
            let fp = loss(store);
            store.get_mut(id)[i] = orig - h;
            let fm = loss(store);
            store.get_mut(id)[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = rel_error(analytic, numeric, floor);
            let name = &store.tensor(id).name;
            rep.record(rel, || {
                format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}")
            });
        }
    }
    rep
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest [`rel_error`] over paired entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

/// Every network of `model` with its name.
pub fn model_mlps(model: &Model) -> Vec<(&'static str, &Mlp)> {
    vec![
        ("sdf", &model.canonical.sdf),
        ("color", &model.canonical.color),
        ("embed", &model.canonical.embed),
        ("root", &model.deformer.root),
        ("body", &model.deformer.body),
        ("skin", &model.deformer.skin),
        ("unc", &model.unc),
    ]
}

/// Checks the parameter and input gradients of `r · mlp(x, cond)` for a
/// random projection `r` after jittering the weights (zero-initialised
/// output layers would otherwise hide most entries).
pub fn mlp_trial<R: Rng>(
    mlp: &Mlp,
    store: &ParamStore,
    per_tensor: usize,
    rng: &mut R,
) -> GradReport {
    let mut store = store.clone();
    let ids = mlp.param_ids();
    for &id in &ids {
        for v in store.get_mut(id) {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let spec = mlp.spec();
    let x: Vec<f64> = (0..spec.input).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cond: Vec<f64> = (0..spec.cond).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..spec.output).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scalar = |s: &ParamStore, x: &[f64]| -> f64 {
        mlp.forward(s, x, &cond)
            .0
            .iter()
            .zip(&r)
            .map(|(a, b)| a * b)
            .sum()
    };
    let (_, tape) = mlp.forward(&store, &x, &cond);
    let mut grads = Grads::new(&store);
    let (dx, _) = mlp.backward(&store, &tape, &cond, &r, &mut grads);
    store.zero_grads();
    store.accumulate(&grads);
    let mut rep = check_params(&mut store, &ids, per_tensor, 1e-5, 1e-6, rng, |s| {
        scalar(s, &x)
    });
    let num = numeric_gradient(&x, 1e-5, |p| scalar(&store, p));
    let name = &store.tensor(ids[0]).name;
    for (i, (a, n)) in dx.iter().zip(&num).enumerate() {
        rep.record(rel_error(*a, *n, 1e-6), || {
            format!("{name} input[{i}]: analytic {a:e} numeric {n:e}")
        });
    }
    rep
}

/// Finite-difference check of the full weighted loss on a micro-batch of
/// `pixels` object pixels of a small pendulum scene. Every term is
/// enabled, parameters are jittered away from their initialisation and the
/// focal lengths are learnable. The uncertainty target is a stop-gradient,
/// so tensors outside the uncertainty network are checked against the total
/// without that term.
pub fn composite_trial(seed: u64, pixels: usize, per_tensor: usize) -> Result<GradReport> {
    composite_trial_with(seed, pixels, per_tensor, LossWeights::default())
}

/// [`composite_trial`] with custom loss weights.
pub fn composite_trial_with(
    seed: u64,
    pixels: usize,
    per_tensor: usize,
    weights: LossWeights,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = FitConfig::tiny();
    cfg.weights = weights;
    cfg.tau_eps = 0.0;
    cfg.trans_cutoff = 0.0;
    cfg.learn_focal = true;
    let script = SceneScript::fixture("pendulum")?.resized(16, 3);
    let data = Dataset::from_script(&script, false)?;
    let g0: Vec<Se3> = data
        .frames
        .iter()
        .map(|f| f.gt_root.expect("synthetic roots"))
        .collect();
    let mut model = Model::new(&cfg, &data, &g0, &mut rng)?;
    let jitter: Vec<(ParamId, f64)> = model
        .store
        .tensors()
        .filter(|(_, t)| t.group != Group::Buffer && t.group != Group::Camera)
        .map(|(id, t)| {
            (
                id,
                if t.name.starts_with("code.") {
                    0.1
                } else {
                    0.05
                },
            )
        })
        .collect();
    for (id, s) in jitter {
        for v in model.store.get_mut(id) {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut cands = Vec::new();
    for (t, f) in data.frames.iter().enumerate() {
        for y in 0..data.height {
            for x in 0..data.width {
                let flow = FLOW_OFFSETS
                    .iter()
                    .copied()
                    .find(|&k| f.flow(k).is_some_and(|im| im.pixel(x, y)[2] > 0.5));
                if f.sil.pixel(x, y)[0] > 0.5 && flow.is_some() {
                    cands.push(PixelSample {
                        frame: t,
                        x,
                        y,
                        flow,
                        active: false,
                    });
                }
            }
        }
    }
    let picked: Vec<PixelSample> = (0..pixels)
        .map(|_| cands[rng.gen_range(0..cands.len())])
        .collect();
    let jit = (0..picked.len() * cfg.samples_per_ray)
        .map(|_| rng.gen::<f64>())
        .collect();
    let samples = SampleSet {
        samples: picked,
        jitter: jit,
        per_ray: cfg.samples_per_ray,
    };
    let s = StepSettings::from_config(&cfg, 0.1, false);

    let (_, grads) = evaluate(&model, &data, &samples, &s, true)?;
    model.store.zero_grads();
    model.store.accumulate(&grads.expect("gradients"));
    let w_unc = s.weights.uncertainty;
    let touched: Vec<usize> = grads_offsets(&model);
    let mut rep = GradReport::default();
    let ids: Vec<ParamId> = model
        .store
        .tensors()
        .filter(|(_, t)| t.group != Group::Buffer)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let (n, unc, name) = {
            let t = model.store.tensor(id);
            (t.len(), t.group == Group::Uncertainty, t.name.clone())
        };
        let sparse = id == model.pixels.id;
        for _ in 0..per_tensor.min(n) {
            let i = if sparse && !touched.is_empty() {
                touched[rng.gen_range(0..touched.len())]
            } else {
                rng.gen_range(0..n)
            };
            let analytic = model.store.grad(id)[i];
            let f = |m: &Model| -> Result<f64> {
                let r = evaluate(m, &data, &samples, &s, false)?.0;
                Ok(if unc {
                    r.total()
                } else {
                    r.total() - w_unc * r.uncertainty
                })
            };
            let orig = model.store.get(id)[i];
            let h = 1e-5 * orig.abs().max(1.0);
            model.store.get_mut(id)[i] = orig + h;
            let fp = f(&model)?;
            model.store.get_mut(id)[i] = orig - h;
            let fm = f(&model)?;
            model.store.get_mut(id)[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            rep.record(rel_error(analytic, numeric, 1e-6), || {
                format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}")
            });
        }
    }
    Ok(rep)
}

/// Pixel-embedding entries with a nonzero gradient.
fn grads_offsets(model: &Model) -> Vec<usize> {
    let g = model.store.grad(model.pixels.id);
    (0..g.len()).filter(|&i| g[i] != 0.0).collect()
}
