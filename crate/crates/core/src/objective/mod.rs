//! Optimization losses, the pixel sampler and the batched forward/backward
//! pass that ties rendering, warping and registration together.

mod batch;

pub use batch::{evaluate, render_image, BatchGrads, RenderView, StepSettings};

use std::fmt::Write as _;

use rand::Rng;

use crate::config::LossWeights;
use crate::synth::Dataset;
use crate::synth::FLOW_OFFSETS;

/// Loss terms of one batch (means over their valid samples).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rgb: f64,
    pub sil: f64,
    pub flow: f64,
    pub matching: f64,
    pub cycle_2d: f64,
    pub cycle_3d: f64,
    pub uncertainty: f64,
    pub weights: LossWeights,
    pub rays: usize,
    pub feature_rays: usize,
    pub flow_rays: usize,
    /// Feature rays whose forward-warped point fell behind the camera.
    pub projection_failures: usize,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        let w = &self.weights;
        w.rgb * self.rgb
            + w.sil * self.sil
            + w.flow * self.flow
            + w.matching * self.matching
            + w.cycle_2d * self.cycle_2d
            + w.cycle_3d * self.cycle_3d
            + w.uncertainty * self.uncertainty
    }

    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("rgb", self.rgb),
            ("sil", self.sil),
            ("flow", self.flow),
            ("match", self.matching),
            ("cyc2d", self.cycle_2d),
            ("cyc3d", self.cycle_3d),
            ("unc", self.uncertainty),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    /// `key=value` fields for the metrics log.
    pub fn log_fields(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.terms() {
            write!(s, " {k}={v:.9e}").unwrap();
        }
        write!(
            s,
            " total={:.9e} rays={} feat_rays={} flow_rays={}",
            self.total(),
            self.rays,
            self.feature_rays,
            self.flow_rays
        )
        .unwrap();
        s
    }
}

/// `(L_rgb, L_sil)`: mean squared color residual (summed over channels) and
/// mean squared opacity residual.
pub fn loss_rgb_sil(
    rgb: &[[f64; 3]],
    opacity: &[f64],
    target_rgb: &[[f64; 3]],
    target_sil: &[f64],
) -> (f64, f64) {
    let n = rgb.len().max(1) as f64;
    let l_rgb = rgb
        .iter()
        .zip(target_rgb)
        .map(|(c, t)| (0..3).map(|k| (c[k] - t[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let l_sil = opacity
        .iter()
        .zip(target_sil)
        .map(|(o, s)| (o - s).powi(2))
        .sum::<f64>()
        / n;
    (l_rgb, l_sil)
}

/// Mean squared flow residual over valid samples; `(loss, valid count)`.
pub fn loss_flow(flow: &[Option<[f64; 2]>], target: &[[f64; 2]]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (f, t) in flow.iter().zip(target) {
        if let Some(f) = f {
            sum += (f[0] - t[0]).powi(2) + (f[1] - t[1]).powi(2);
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

/// Mean squared distance between paired canonical points.
pub fn loss_match(warped: &[crate::geom::Vec3], matched: &[crate::geom::Vec3]) -> f64 {
    if warped.is_empty() {
        return 0.0;
    }
    warped
        .iter()
        .zip(matched)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / warped.len() as f64
}

/// `Σ τ_i |r_i|² / Σ τ_i`; zero without weight.
pub fn loss_3d_cycle(tau: &[f64], residual_sq: &[f64]) -> f64 {
    let den: f64 = tau.iter().sum();
    if den <= 0.0 {
        return 0.0;
    }
    tau.iter().zip(residual_sq).map(|(t, r)| t * r).sum::<f64>() / den
}

/// Mean absolute error between predicted and observed color errors.
pub fn loss_uncertainty(pred: &[f64], errors: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(errors)
        .map(|(p, e)| (p - e).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// One sampled pixel. `flow` is the temporal offset of its flow target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSample {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub flow: Option<isize>,
    pub active: bool,
}

/// A training batch: uniform samples followed by active ones, plus the
/// stratification jitter of every ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<PixelSample>,
    pub jitter: Vec<f64>,
    pub per_ray: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn jitter(&self, i: usize) -> &[f64] {
        &self.jitter[i * self.per_ray..(i + 1) * self.per_ray]
    }

    pub fn num_active(&self) -> usize {
        self.samples.iter().filter(|s| s.active).count()
    }

    /// Explicit samples with jitter `u`, for tests and probes.
    pub fn from_pixels(samples: Vec<PixelSample>, per_ray: usize, u: f64) -> SampleSet {
        SampleSet {
            jitter: vec![u; samples.len() * per_ray],
            samples,
            per_ray,
        }
    }
}

/// Active-sampling request: keep the `keep` highest-scoring of
/// `candidates` uniform draws.
pub struct ActiveRequest<'a> {
    pub keep: usize,
    pub candidates: usize,
    pub score: &'a (dyn Fn(usize, usize, usize) -> f64 + Sync),
}

fn uniform_pixel<R: Rng>(data: &Dataset, rng: &mut R) -> (usize, usize, usize) {
    let t = rng.gen_range(0..data.num_frames());
    let x = rng.gen_range(0..data.width);
    let y = rng.gen_range(0..data.height);
    (t, x, y)
}

fn pick_flow<R: Rng>(data: &Dataset, t: usize, rng: &mut R) -> Option<isize> {
    let f = &data.frames[t];
    let avail: Vec<isize> = FLOW_OFFSETS
        .iter()
        .copied()
        .filter(|&k| data.offset_frame(t, k).is_some() && f.flow(k).is_some())
        .collect();
    (!avail.is_empty()).then(|| avail[rng.gen_range(0..avail.len())])
}

/// `uniform` pixels drawn over all frames, plus the top `active.keep`
/// candidates by score when requested. Each sample gets a flow partner
/// `t ± k`, `k ∈ {1, 2}`, within its video when one exists.
pub fn sample_pixels<R: Rng>(
    data: &Dataset,
    uniform: usize,
    active: Option<ActiveRequest<'_>>,
    per_ray: usize,
    rng: &mut R,
) -> SampleSet {
    let mut samples = Vec::with_capacity(uniform);
    for _ in 0..uniform {
        let (frame, x, y) = uniform_pixel(data, rng);
        let flow = pick_flow(data, frame, rng);
        samples.push(PixelSample {
            frame,
            x,
            y,
            flow,
            active: false,
        });
    }
    if let Some(req) = active {
        let cands: Vec<(usize, usize, usize)> = (0..req.candidates)
            .map(|_| uniform_pixel(data, rng))
            .collect();
        let scores = score_all(&cands, req.score);
        for i in top_k(&scores, req.keep) {
            let (frame, x, y) = cands[i];
            let flow = pick_flow(data, frame, rng);
            samples.push(PixelSample {
                frame,
                x,
                y,
                flow,
                active: true,
            });
        }
    }
    let jitter = (0..samples.len() * per_ray)
        .map(|_| rng.gen::<f64>())
        .collect();
    SampleSet {
        samples,
        jitter,
        per_ray,
    }
}

fn score_all(
    cands: &[(usize, usize, usize)],
    score: &(dyn Fn(usize, usize, usize) -> f64 + Sync),
) -> Vec<f64> {
    use rayon::prelude::*;
    cands
        .par_iter()
        .with_min_len(256)
        .map(|&(t, x, y)| score(t, x, y))
        .collect()
}

/// Indices of the `k` largest scores, ties broken by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests;
