//! Batched loss evaluation with a hand-written reverse pass.
//!
//! Phase one traces every ray in parallel and keeps its tapes. Phase two
//! backpropagates fixed-size chunks of rays into private accumulators that
//! are merged in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{LossReport, SampleSet};
use crate::canonical::{density_grad, sdf_to_density};
use crate::config::{FitConfig, LossWeights};
use crate::embed::{CanonicalGrid, MatchRecord};
use crate::error::Result;
use crate::geom::{Camera, Rigid, Vec3};
use crate::model::Model;
use crate::nnet::{Grads, MlpTape, ENV_CODE_DIM};
use crate::render::{
    composite, composite_vjp, ray_sphere_depths, ray_sphere_depths_vjp, sample_gaps,
    stratified_depths, Composite, Image, TAU_MIN,
};
use crate::synth::Dataset;
use crate::warp::{BackwardRecord, DeformGrad, ForwardRecord, FrameState, RestState};

const CHUNK: usize = 16;

/// Per-iteration switches and scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    /// Scheduled β before the learnable factor.
    pub beta_schedule: f64,
    pub weights: LossWeights,
    pub tau_eps: f64,
    pub trans_cutoff: f64,
    pub background: [f64; 3],
}

impl StepSettings {
    /// Weights with ablated terms removed; `warmup` keeps only the
    /// reconstruction and flow terms.
    pub fn from_config(cfg: &FitConfig, beta_schedule: f64, warmup: bool) -> StepSettings {
        let mut w = cfg.weights;
        if cfg.ablations.no_feature || warmup {
            w.matching = 0.0;
            w.cycle_2d = 0.0;
        }
        if warmup {
            w.cycle_3d = 0.0;
        }
        if cfg.ablations.no_flow {
            w.flow = 0.0;
        }
        StepSettings {
            beta_schedule,
            weights: w,
            tau_eps: cfg.tau_eps,
            trans_cutoff: cfg.trans_cutoff,
            background: [0.0; 3],
        }
    }

    fn features(&self) -> bool {
        self.weights.matching > 0.0 || self.weights.cycle_2d > 0.0
    }
}

/// Parameter gradients of one batch.
pub type BatchGrads = Grads;

struct Ctx<'a> {
    model: &'a Model,
    rest: &'a RestState,
    states: &'a [Option<FrameState>],
    grid: Option<&'a CanonicalGrid>,
    s: &'a StepSettings,
    beta: f64,
    alpha: f64,
    sdf_pre: Vec<f64>,
    center: Vec3,
    radius: f64,
}

/// One marched ray with everything its adjoint needs.
struct Trace {
    q: Vec3,
    /// Bounding sphere center in camera space and the depth interval.
    center: Vec3,
    near: f64,
    far: f64,
    depths: Vec<f64>,
    gaps: Vec<f64>,
    pts: Vec<Vec3>,
    back: Vec<BackwardRecord>,
    sdf: Vec<f64>,
    sigma: Vec<f64>,
    tapes: Vec<MlpTape>,
    comp: Composite,
    colors: Vec<[f64; 3]>,
    ctapes: Vec<Option<MlpTape>>,
    cond: Vec<f64>,
    rgb: [f64; 3],
    opacity: f64,
    x_exp: Vec3,
}

struct FeatRec {
    psi: Vec<f64>,
    m: MatchRecord,
    cyc: Option<(ForwardRecord, [f64; 2])>,
}

struct FlowRec {
    tp: usize,
    fwd: ForwardRecord,
    proj: [f64; 2],
    target: [f64; 2],
}

struct RayRecord {
    t: usize,
    px: [f64; 2],
    pix: (usize, usize),
    trace: Trace,
    target_rgb: [f64; 3],
    target_sil: f64,
    feat: Option<FeatRec>,
    proj_failed: bool,
    flow: Option<FlowRec>,
    cyc: Vec<(usize, ForwardRecord)>,
    unc: Option<(MlpTape, f64, f64)>,
}

impl Ctx<'_> {
    fn keep(&self, tau: f64) -> bool {
        self.s.tau_eps == 0.0 || tau > self.s.tau_eps
    }

    fn trace(
        &self,
        fs: &FrameState,
        cam: &Camera,
        px: [f64; 2],
        jitter: Option<&[f64]>,
        n: usize,
        env: &[f64],
    ) -> Trace {
        let m = self.model;
        let store = &m.store;
        let q = cam.unproject_depth(px);
        let qn = q.norm();
        let view = fs.g.r.transpose() * (q / qn);
        let center = fs.g.apply(&self.center);
        let mut tr = Trace {
            q,
            center,
            near: 0.0,
            far: 0.0,
            depths: Vec::new(),
            gaps: Vec::new(),
            pts: Vec::new(),
            back: Vec::new(),
            sdf: Vec::new(),
            sigma: Vec::new(),
            tapes: Vec::new(),
            comp: composite(&[]),
            colors: Vec::new(),
            ctapes: Vec::new(),
            cond: Vec::new(),
            rgb: self.s.background,
            opacity: 0.0,
            x_exp: Vec3::zeros(),
        };
        let Some((near, far)) = ray_sphere_depths(&q, &center, self.radius) else {
            return tr;
        };
        tr.near = near;
        tr.far = far;
        let depths = stratified_depths(near, far, n, jitter);
        let gaps = sample_gaps(&depths);
        let mut thick = Vec::with_capacity(n);
        let mut log_t = 0.0f64;
        for i in 0..n {
            if self.s.trans_cutoff > 0.0 && log_t.exp() < self.s.trans_cutoff {
                break;
            }
            let x = q * depths[i];
            let back = m.deformer.warp_backward(store, fs, &x);
            let (s, tape) = m.canonical.sdf_tape(store, &back.x_star, &self.sdf_pre);
            let sigma = sdf_to_density(s, self.beta);
            let a = sigma / self.beta * gaps[i] * qn;
            log_t -= a;
            thick.push(a);
            tr.depths.push(depths[i]);
            tr.gaps.push(gaps[i]);
            tr.pts.push(x);
            tr.back.push(back);
            tr.sdf.push(s);
            tr.sigma.push(sigma);
            tr.tapes.push(tape);
        }
        tr.comp = composite(&thick);
        tr.cond = m.canonical.color_cond(&view, env);
        let pre = m.canonical.color_preact(store, &tr.cond);
        let bg = self.s.background;
        let mut rgb = [0.0; 3];
        for (i, &tau) in tr.comp.tau.iter().enumerate() {
            let (c, tape) = if self.keep(tau) {
                let (c, tape) = m.canonical.color_tape(store, &tr.back[i].x_star, &pre);
                (c, Some(tape))
            } else {
                (bg, None)
            };
            for k in 0..3 {
                rgb[k] += tau * c[k];
            }
            tr.colors.push(c);
            tr.ctapes.push(tape);
            tr.x_exp += tr.back[i].x_star * tau;
        }
        tr.opacity = tr.comp.opacity();
        for k in 0..3 {
            rgb[k] += (1.0 - tr.opacity) * bg[k];
        }
        tr.rgb = rgb;
        tr
    }

    fn state(&self, t: usize) -> &FrameState {
        self.states[t].as_ref().expect("frame state")
    }

    fn forward_ray(&self, data: &Dataset, samples: &SampleSet, i: usize) -> RayRecord {
        let m = self.model;
        let store = &m.store;
        let smp = samples.samples[i];
        let t = smp.frame;
        let fs = self.state(t);
        let cam = m.camera(t);
        let px = cam.pixel_center(smp.x, smp.y);
        let obs = &data.frames[t];
        let env = m.codes.env_code(store, m.video_of(t));
        let trace = self.trace(fs, &cam, px, Some(samples.jitter(i)), samples.per_ray, env);
        let c = obs.rgb.pixel(smp.x, smp.y);
        let target_rgb = [c[0], c[1], c[2]];
        let target_sil = obs.sil.pixel(smp.x, smp.y)[0];
        let w = &self.s.weights;
        let on_object = target_sil >= 0.5 && trace.opacity >= TAU_MIN;

        let mut proj_failed = false;
        let feat = match self.grid {
            Some(grid) if on_object && self.s.features() => {
                let psi = m.pixels.pixel(store, t, smp.x, smp.y).to_vec();
                let mrec = grid.match_soft_argmax(&psi, self.alpha);
                let cyc = if w.cycle_2d > 0.0 {
                    let fwd = m.deformer.warp_forward(store, self.rest, fs, &mrec.point);
                    match cam.project(&fwd.x_t) {
                        Ok(p) => Some((fwd, p)),
                        Err(_) => {
                            proj_failed = true;
                            None
                        }
                    }
                } else {
                    None
                };
                Some(FeatRec { psi, m: mrec, cyc })
            }
            _ => None,
        };

        let flow = match smp.flow {
            Some(k) if on_object && w.flow > 0.0 => {
                let im = obs.flow(k);
                let tp = data.offset_frame(t, k);
                match (im, tp) {
                    (Some(im), Some(tp)) if im.pixel(smp.x, smp.y)[2] > 0.5 => {
                        let f = im.pixel(smp.x, smp.y);
                        let fwd =
                            m.deformer
                                .warp_forward(store, self.rest, self.state(tp), &trace.x_exp);
                        m.camera(tp).project(&fwd.x_t).ok().map(|proj| FlowRec {
                            tp,
                            fwd,
                            proj,
                            target: [f[0], f[1]],
                        })
                    }
                    _ => None,
                }
            }
            _ => None,
        };

        let mut cyc = Vec::new();
        if w.cycle_3d > 0.0 {
            for (k, &tau) in trace.comp.tau.iter().enumerate() {
                if tau > 0.0 && self.keep(tau) {
                    cyc.push((
                        k,
                        m.deformer
                            .warp_forward(store, self.rest, fs, &trace.back[k].x_star),
                    ));
                }
            }
        }

        let unc = (w.uncertainty > 0.0).then(|| {
            let input = m.unc_input(t, smp.x, smp.y);
            let (out, tape) = m.unc.forward(store, &input, &[]);
            let e: f64 = (0..3).map(|k| (trace.rgb[k] - target_rgb[k]).powi(2)).sum();
            (tape, out[0], e)
        });

        RayRecord {
            t,
            px,
            pix: (smp.x, smp.y),
            trace,
            target_rgb,
            target_sil,
            feat,
            proj_failed,
            flow,
            cyc,
            unc,
        }
    }
}

struct Norms {
    rays: f64,
    feat: f64,
    flow: f64,
    tau: f64,
    cycle_3d: f64,
}

struct Acc {
    grads: Grads,
    deform: DeformGrad,
    d_emb: Vec<f64>,
    d_beta: f64,
    d_alpha: f64,
    d_focal: Vec<f64>,
}

impl Acc {
    fn new(ctx: &Ctx) -> Acc {
        let m = ctx.model;
        Acc {
            grads: Grads::new(&m.store),
            deform: m.deformer.new_grad(m.num_frames()),
            d_emb: vec![0.0; ctx.grid.map_or(0, |g| g.embeddings.len())],
            d_beta: 0.0,
            d_alpha: 0.0,
            d_focal: vec![0.0; 2 * m.num_videos()],
        }
    }

    fn merge(&mut self, o: Acc) {
        self.grads.merge(o.grads);
        self.deform.merge(&o.deform);
        for (a, b) in self.d_emb.iter_mut().zip(&o.d_emb) {
            *a += b;
        }
        self.d_beta += o.d_beta;
        self.d_alpha += o.d_alpha;
        for (a, b) in self.d_focal.iter_mut().zip(&o.d_focal) {
            *a += b;
        }
    }
}

impl Ctx<'_> {
    fn backward_ray(&self, r: &RayRecord, n: &Norms, acc: &mut Acc) {
        let m = self.model;
        let store = &m.store;
        let w = &self.s.weights;
        let tr = &r.trace;
        let ns = tr.pts.len();
        let fs = self.state(r.t);
        let cam = m.camera(r.t);
        let v = m.video_of(r.t);
        let bg = self.s.background;

        let d_rgb: [f64; 3] =
            std::array::from_fn(|k| w.rgb * 2.0 * (tr.rgb[k] - r.target_rgb[k]) / n.rays);
        let d_o = w.sil * 2.0 * (tr.opacity - r.target_sil) / n.rays;
        let mut d_tau = vec![d_o; ns];
        let mut d_xstar = vec![Vec3::zeros(); ns];
        let mut d_x = vec![Vec3::zeros(); ns];
        let mut d_xexp = Vec3::zeros();

        if let Some(f) = &r.feat {
            let grid = self.grid.expect("grid for feature rays");
            let diff = tr.x_exp - f.m.point;
            let g = diff * (w.matching * 2.0 / n.feat);
            d_xexp += g;
            let mut d_hat = -g;
            if let Some((fwd, p)) = &f.cyc {
                let s = [m.width as f64, m.height as f64];
                let d_p = [
                    w.cycle_2d * 2.0 * (p[0] - r.px[0]) / (s[0] * s[0]) / n.feat,
                    w.cycle_2d * 2.0 * (p[1] - r.px[1]) / (s[1] * s[1]) / n.feat,
                ];
                let (dxt, dfx, dfy) = cam.project_vjp(&fwd.x_t, d_p);
                acc.d_focal[2 * v] += dfx;
                acc.d_focal[2 * v + 1] += dfy;
                let (fg, rg) = acc.deform.frame_and_rest(r.t);
                d_hat += m.deformer.warp_forward_vjp(
                    store,
                    self.rest,
                    fs,
                    &f.m.point,
                    fwd,
                    &dxt,
                    fg,
                    rg,
                    &mut acc.grads,
                );
            }
            let (d_psi, d_alpha) = grid.match_vjp(&f.psi, self.alpha, &f.m, &d_hat, &mut acc.d_emb);
            acc.d_alpha += d_alpha;
            let off = m.pixels.offset(r.t, r.pix.0, r.pix.1);
            acc.grads.add_sparse(m.pixels.id, off, &d_psi);
        }

        if let Some(f) = &r.flow {
            let s = [m.width as f64, m.height as f64];
            let d_p = [
                w.flow * 2.0 * (f.proj[0] - r.px[0] - f.target[0]) / (s[0] * s[0]) / n.flow,
                w.flow * 2.0 * (f.proj[1] - r.px[1] - f.target[1]) / (s[1] * s[1]) / n.flow,
            ];
            let cam_p = m.camera(f.tp);
            let vp = m.video_of(f.tp);
            let (dxt, dfx, dfy) = cam_p.project_vjp(&f.fwd.x_t, d_p);
            acc.d_focal[2 * vp] += dfx;
            acc.d_focal[2 * vp + 1] += dfy;
            let (fg, rg) = acc.deform.frame_and_rest(f.tp);
            d_xexp += m.deformer.warp_forward_vjp(
                store,
                self.rest,
                self.state(f.tp),
                &tr.x_exp,
                &f.fwd,
                &dxt,
                fg,
                rg,
                &mut acc.grads,
            );
        }

        for (k, fwd) in &r.cyc {
            let k = *k;
            let res = fwd.x_t - tr.pts[k];
            let g = res * (w.cycle_3d * 2.0 * tr.comp.tau[k] / n.tau);
            let (fg, rg) = acc.deform.frame_and_rest(r.t);
            d_xstar[k] += m.deformer.warp_forward_vjp(
                store,
                self.rest,
                fs,
                &tr.back[k].x_star,
                fwd,
                &g,
                fg,
                rg,
                &mut acc.grads,
            );
            d_x[k] -= g;
            d_tau[k] += w.cycle_3d * (res.norm_squared() - n.cycle_3d) / n.tau;
        }

        for i in 0..ns {
            let c = tr.colors[i];
            d_tau[i] += (0..3).map(|k| d_rgb[k] * (c[k] - bg[k])).sum::<f64>();
            d_tau[i] += d_xexp.dot(&tr.back[i].x_star);
            d_xstar[i] += d_xexp * tr.comp.tau[i];
        }

        // color network
        let mut d_q = Vec3::zeros();
        if ns > 0 {
            let mut d_pre = vec![
                0.0;
                m.canonical
                    .color
                    .spec()
                    .hidden
                    .first()
                    .copied()
                    .unwrap_or(3)
            ];
            let mut any = false;
            for i in 0..ns {
                if let Some(tape) = &tr.ctapes[i] {
                    let tau = tr.comp.tau[i];
                    let dc = [tau * d_rgb[0], tau * d_rgb[1], tau * d_rgb[2]];
                    if dc.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    any = true;
                    d_xstar[i] += m.canonical.color_backward(
                        store,
                        tape,
                        &tr.colors[i],
                        &dc,
                        &mut d_pre,
                        &mut acc.grads,
                    );
                }
            }
            if any {
                let (dv, d_env) =
                    m.canonical
                        .color_cond_backward(store, &tr.cond, &d_pre, &mut acc.grads);
                let slot = acc.grads.slot(m.codes.env, m.num_videos() * ENV_CODE_DIM);
                for (a, b) in slot[v * ENV_CODE_DIM..(v + 1) * ENV_CODE_DIM]
                    .iter_mut()
                    .zip(&d_env)
                {
                    *a += b;
                }
                // v = Rᵀ q̂
                let qn = tr.q.norm();
                let qh = tr.q / qn;
                let fg = acc.deform.frame(r.t);
                fg.g.r += qh * dv.transpose();
                let dqh = fs.g.r * dv;
                d_q += (dqh - qh * qh.dot(&dqh)) / qn;
            }
        }

        // density and warps
        let da = composite_vjp(&tr.comp, &d_tau);
        let qn = tr.q.norm();
        let beta = self.beta;
        let mut d_qn = 0.0;
        let span = tr.far - tr.near;
        let (mut d_near, mut d_far) = (0.0, 0.0);
        for i in 0..ns {
            let delta = tr.gaps[i] * qn;
            let sigma = tr.sigma[i];
            let d_sigma = da[i] * delta / beta;
            d_qn += da[i] * sigma / beta * tr.gaps[i];
            // gaps scale with the interval length
            let d_span = da[i] * sigma / beta * qn * tr.gaps[i] / span;
            d_near -= d_span;
            d_far += d_span;
            let (ds_dsdf, ds_dbeta) = density_grad(tr.sdf[i], beta);
            acc.d_beta += da[i] * (delta / beta * ds_dbeta - sigma * delta / (beta * beta));
            let d_s = d_sigma * ds_dsdf;
            if d_s != 0.0 {
                d_xstar[i] += m
                    .canonical
                    .sdf_backward(store, &tr.tapes[i], d_s, &mut acc.grads);
            }
            let mut dx = d_x[i];
            if d_xstar[i] != Vec3::zeros() {
                let fg = acc.deform.frame(r.t);
                dx += m.deformer.warp_backward_vjp(
                    store,
                    fs,
                    &tr.pts[i],
                    &tr.back[i],
                    &d_xstar[i],
                    fg,
                    &mut acc.grads,
                );
            }
            d_q += dx * tr.depths[i];
            let d_depth = dx.dot(&tr.q);
            let u = (tr.depths[i] - tr.near) / span;
            d_near += d_depth * (1.0 - u);
            d_far += d_depth * u;
        }
        d_q += tr.q / qn * d_qn;
        if ns > 0 && (d_near != 0.0 || d_far != 0.0) {
            let (dq, dc) = ray_sphere_depths_vjp(&tr.q, &tr.center, self.radius, d_near, d_far);
            d_q += dq;
            let fg = acc.deform.frame(r.t);
            fs.g.apply_vjp(&self.center, &dc, &mut fg.g);
        }
        // q = ((x − cx)/fx, (y − cy)/fy, 1)
        acc.d_focal[2 * v] -= d_q.x * tr.q.x / cam.fx;
        acc.d_focal[2 * v + 1] -= d_q.y * tr.q.y / cam.fy;

        if let Some((tape, u, e)) = &r.unc {
            let d_u = w.uncertainty * (u - e).signum() / n.rays;
            if d_u != 0.0 {
                m.unc.backward(store, tape, &[], &[d_u], &mut acc.grads);
            }
        }
    }
}

/// Loss report of one batch and, when `backward` is set, the parameter
/// gradients.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    samples: &SampleSet,
    s: &StepSettings,
    backward: bool,
) -> Result<(LossReport, Option<BatchGrads>)> {
    let grid = if s.features() {
        Some(model.grid()?)
    } else {
        None
    };
    let rest = model.rest_state();
    let mut needed = vec![false; model.num_frames()];
    for smp in &samples.samples {
        needed[smp.frame] = true;
        if let Some(tp) = smp.flow.and_then(|k| data.offset_frame(smp.frame, k)) {
            needed[tp] = true;
        }
    }
    let states: Vec<Option<FrameState>> = needed
        .par_iter()
        .enumerate()
        .map(|(t, &n)| n.then(|| model.frame_state(&rest, t)))
        .collect();
    let bounds = model.canonical_bounds();
    let ctx = Ctx {
        model,
        rest: &rest,
        states: &states,
        grid: grid.as_ref(),
        s,
        beta: s.beta_schedule * model.beta_scale(),
        alpha: model.alpha(),
        sdf_pre: model.canonical.sdf_preact(&model.store),
        center: bounds.center(),
        radius: 0.5 * bounds.diagonal(),
    };
    let records: Vec<RayRecord> = (0..samples.len())
        .into_par_iter()
        .map(|i| ctx.forward_ray(data, samples, i))
        .collect();

    let n_rays = records.len();
    let n_feat = records.iter().filter(|r| r.feat.is_some()).count();
    let n_flow = records.iter().filter(|r| r.flow.is_some()).count();
    let tau_sum: f64 = records
        .iter()
        .map(|r| r.cyc.iter().map(|(k, _)| r.trace.comp.tau[*k]).sum::<f64>())
        .sum();
    let mut rep = LossReport {
        weights: s.weights,
        rays: n_rays,
        feature_rays: n_feat,
        flow_rays: n_flow,
        projection_failures: records.iter().filter(|r| r.proj_failed).count(),
        ..Default::default()
    };
    let mut cyc_num = 0.0;
    for r in &records {
        let tr = &r.trace;
        rep.rgb += (0..3)
            .map(|k| (tr.rgb[k] - r.target_rgb[k]).powi(2))
            .sum::<f64>();
        rep.sil += (tr.opacity - r.target_sil).powi(2);
        if let Some(f) = &r.feat {
            rep.matching += (tr.x_exp - f.m.point).norm_squared();
            if let Some((_, p)) = &f.cyc {
                rep.cycle_2d += ((p[0] - r.px[0]) / model.width as f64).powi(2)
                    + ((p[1] - r.px[1]) / model.height as f64).powi(2);
            }
        }
        if let Some(f) = &r.flow {
            rep.flow += ((f.proj[0] - r.px[0] - f.target[0]) / model.width as f64).powi(2)
                + ((f.proj[1] - r.px[1] - f.target[1]) / model.height as f64).powi(2);
        }
        for (k, fwd) in &r.cyc {
            cyc_num += tr.comp.tau[*k] * (fwd.x_t - tr.pts[*k]).norm_squared();
        }
        if let Some((_, u, e)) = &r.unc {
            rep.uncertainty += (u - e).abs();
        }
    }
    let div = |x: f64, n: f64| if n > 0.0 { x / n } else { 0.0 };
    let nr = n_rays as f64;
    rep.rgb = div(rep.rgb, nr);
    rep.sil = div(rep.sil, nr);
    rep.uncertainty = div(rep.uncertainty, nr);
    rep.matching = div(rep.matching, n_feat as f64);
    rep.cycle_2d = div(rep.cycle_2d, n_feat as f64);
    rep.flow = div(rep.flow, n_flow as f64);
    rep.cycle_3d = div(cyc_num, tau_sum);

    if !backward {
        return Ok((rep, None));
    }
    let norms = Norms {
        rays: nr.max(1.0),
        feat: (n_feat as f64).max(1.0),
        flow: (n_flow as f64).max(1.0),
        tau: if tau_sum > 0.0 { tau_sum } else { 1.0 },
        cycle_3d: rep.cycle_3d,
    };
    let parts: Vec<Acc> = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Acc::new(&ctx);
            for r in chunk {
                ctx.backward_ray(r, &norms, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Acc::new(&ctx);
    for p in parts {
        total.merge(p);
    }
    let mut grads = total.grads;
    model.deformer.backward_all(
        &model.store,
        &model.codes,
        &rest,
        &states,
        &total.deform,
        &mut grads,
    );
    if let Some(g) = &grid {
        g.backward(&model.canonical, &model.store, &total.d_emb, &mut grads);
    }
    grads.slot(model.beta_offset, 1)[0] += total.d_beta * ctx.beta;
    grads.slot(model.log_alpha, 1)[0] += total.d_alpha * ctx.alpha;
    let nf = total.d_focal.len();
    for (a, b) in grads.slot(model.focal, nf).iter_mut().zip(&total.d_focal) {
        *a += b;
    }
    Ok((rep, Some(grads)))
}

/// A camera and root pose to render frame `frame`'s articulation from.
#[derive(Clone, Copy, Debug)]
pub struct RenderView {
    pub frame: usize,
    pub camera: Camera,
    /// Replaces the frame's root pose (novel views).
    pub root: Option<Rigid>,
}

/// Renders color and opacity images with midpoint samples.
pub fn render_image(
    model: &Model,
    view: &RenderView,
    samples: usize,
    s: &StepSettings,
) -> (Image, Image) {
    let rest = model.rest_state();
    let mut fs = model.frame_state(&rest, view.frame);
    if let Some(g) = view.root {
        fs.g = g;
        fs.g_inv = g.inverse();
    }
    let states: Vec<Option<FrameState>> = Vec::new();
    let bounds = model.canonical_bounds();
    let ctx = Ctx {
        model,
        rest: &rest,
        states: &states,
        grid: None,
        s,
        beta: s.beta_schedule * model.beta_scale(),
        alpha: model.alpha(),
        sdf_pre: model.canonical.sdf_preact(&model.store),
        center: bounds.center(),
        radius: 0.5 * bounds.diagonal(),
    };
    let cam = view.camera;
    let env = model
        .codes
        .env_code(&model.store, model.video_of(view.frame));
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(3 * cam.width);
            let mut sil = Vec::with_capacity(cam.width);
            for x in 0..cam.width {
                let tr = ctx.trace(&fs, &cam, cam.pixel_center(x, y), None, samples, env);
                rgb.extend(tr.rgb);
                sil.push(tr.opacity);
            }
            (rgb, sil)
        })
        .collect();
    let mut rgb = Image::new(cam.width, cam.height, 3);
    let mut sil = Image::new(cam.width, cam.height, 1);
    rgb.data = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    sil.data = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    (rgb, sil)
}
