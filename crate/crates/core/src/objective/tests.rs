use super::*;
use crate::config::FitConfig;
use crate::geom::{Se3, Vec3};
use crate::model::Model;
use crate::nnet::Group;
use crate::synth::SceneScript;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(cfg: &FitConfig) -> (Dataset, Model) {
    let script = SceneScript::fixture("pendulum").unwrap().resized(16, 3);
    let data = Dataset::from_script(&script, false).unwrap();
    let g0: Vec<Se3> = data.frames.iter().map(|f| f.gt_root.unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(cfg, &data, &g0, &mut rng).unwrap();
    (data, model)
}

fn object_pixels(data: &Dataset, n: usize) -> Vec<PixelSample> {
    let mut out = Vec::new();
    for (t, f) in data.frames.iter().enumerate() {
        for y in 0..data.height {
            for x in 0..data.width {
                let flow = f.flow(1).filter(|im| im.pixel(x, y)[2] > 0.5).map(|_| 1);
                if f.sil.pixel(x, y)[0] > 0.5
                    && flow.is_some()
                    && out.len() < n
                    && (x + y + t) % 3 == 0
                {
                    out.push(PixelSample {
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
    out
}

fn settings(cfg: &FitConfig) -> StepSettings {
    StepSettings::from_config(cfg, 0.05, false)
}

#[test]
fn reconstruction_loss_examples() {
    let c = [[0.2, 0.4, 0.6], [1.0, 0.0, 0.5]];
    assert_eq!(loss_rgb_sil(&c, &[0.3, 0.9], &c, &[0.3, 0.9]), (0.0, 0.0));
    let (_, sil) = loss_rgb_sil(&c, &[0.0; 2], &c, &[1.0, 0.0]);
    assert!((sil - 0.5).abs() < 1e-15);
    let (a, _) = loss_rgb_sil(&c, &[0.0, 0.0], &[[0.0; 3], [1.0; 3]], &[0.0, 0.0]);
    let (b, _) = loss_rgb_sil(
        &[c[1], c[0]],
        &[0.0, 0.0],
        &[[1.0; 3], [0.0; 3]],
        &[0.0, 0.0],
    );
    assert_eq!(a, b);
}

#[test]
fn registration_loss_examples() {
    let t = [[1.0, -2.0], [0.5, 0.5]];
    assert_eq!(loss_flow(&[Some(t[0]), Some(t[1])], &t), (0.0, 2));
    let off = [Some([2.0, -2.0]), Some([1.5, 0.5])];
    assert_eq!(loss_flow(&off, &t), (1.0, 2));
    assert_eq!(loss_flow(&[None, None], &t), (0.0, 0));
    let a = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.0, 2.0)];
    assert_eq!(loss_match(&a, &a), 0.0);
    let d = Vec3::new(0.0, 0.3, 0.4);
    let b: Vec<Vec3> = a.iter().map(|p| p + d).collect();
    assert!((loss_match(&a, &b) - 0.25).abs() < 1e-15);
    assert_eq!(loss_3d_cycle(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    assert!((loss_3d_cycle(&[1.0, 3.0], &[1.0, 2.0]) - 1.75).abs() < 1e-15);
    assert_eq!(loss_uncertainty(&[0.3, 0.1], &[0.3, 0.1]), 0.0);
    assert!((loss_uncertainty(&[0.0; 3], &[0.1; 3]) - 0.1).abs() < 1e-15);
}

#[test]
fn report_total_is_weighted_sum() {
    let r = LossReport {
        rgb: 1.0,
        sil: 2.0,
        flow: 3.0,
        matching: 4.0,
        cycle_2d: 5.0,
        cycle_3d: 6.0,
        uncertainty: 7.0,
        ..Default::default()
    };
    let expect = 1.0 + 2.0 + 0.5 * 3.0 + 0.1 * 4.0 + 0.1 * 5.0 + 0.1 * 6.0 + 7.0;
    assert!((r.total() - expect).abs() < 1e-12);
}

#[test]
fn sampler_sizes_and_flow_partners() {
    let (data, _) = setup(&FitConfig::tiny());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_pixels(&data, 50, None, 4, &mut rng);
    assert_eq!(s.len(), 50);
    assert_eq!(s.jitter.len(), 200);
    for p in &s.samples {
        assert!(p.frame < data.num_frames() && p.x < data.width && p.y < data.height);
        let k = p
            .flow
            .expect("every frame of a 3-frame video has a neighbour");
        let tp = data.offset_frame(p.frame, k).unwrap();
        assert_ne!(tp, p.frame);
        assert_eq!(data.frames[tp].video, data.frames[p.frame].video);
        assert!(k.abs() <= 2);
    }
    let again = sample_pixels(&data, 50, None, 4, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(s, again);
}

#[test]
fn active_samples_score_higher() {
    let (data, _) = setup(&FitConfig::tiny());
    let score = |_t: usize, x: usize, y: usize| ((x * 7 + y * 13) % 17) as f64;
    let req = ActiveRequest {
        keep: 20,
        candidates: 200,
        score: &score,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = sample_pixels(&data, 40, Some(req), 2, &mut rng);
    assert_eq!(s.len(), 60);
    assert_eq!(s.num_active(), 20);
    let mean = |act: bool| {
        let v: Vec<f64> = s
            .samples
            .iter()
            .filter(|p| p.active == act)
            .map(|p| score(p.frame, p.x, p.y))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) >= mean(false));
}

#[test]
fn top_k_picks_distinct_largest() {
    let scores = [0.5, 2.0, 2.0, -1.0, 7.0, 0.0];
    assert_eq!(top_k(&scores, 3), vec![4, 1, 2]);
    let k = top_k(&scores, 6);
    let mut sorted = k.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 6);
}

#[test]
fn batch_losses_are_finite_and_non_negative() {
    let cfg = FitConfig::tiny();
    let (data, model) = setup(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = sample_pixels(&data, 24, None, cfg.samples_per_ray, &mut rng);
    let (rep, grads) = evaluate(&model, &data, &samples, &settings(&cfg), true).unwrap();
    assert!(rep.is_finite());
    assert!(rep.terms().iter().all(|(_, v)| *v >= 0.0));
    assert_eq!(rep.rays, 24);
    assert!(grads.is_some());
}

#[test]
fn zero_weight_removes_the_flow_gradient_exactly() {
    let mut cfg = FitConfig::tiny();
    cfg.weights.flow = 0.0;
    let (data, model) = setup(&cfg);
    let with = SampleSet::from_pixels(object_pixels(&data, 6), cfg.samples_per_ray, 0.3);
    let mut without = with.clone();
    without.samples.iter_mut().for_each(|s| s.flow = None);
    let s = settings(&cfg);
    let (_, a) = evaluate(&model, &data, &with, &s, true).unwrap();
    let (_, b) = evaluate(&model, &data, &without, &s, true).unwrap();
    let (a, b) = (a.unwrap(), b.unwrap());
    for (id, t) in model.store.tensors() {
        assert_eq!(a.get(id), b.get(id), "{}", t.name);
    }
}

#[test]
fn uncertainty_gradient_stays_in_its_network() {
    let mut cfg = FitConfig::tiny();
    cfg.weights = crate::config::LossWeights {
        rgb: 0.0,
        sil: 0.0,
        flow: 0.0,
        matching: 0.0,
        cycle_2d: 0.0,
        cycle_3d: 0.0,
        uncertainty: 1.0,
    };
    let (data, model) = setup(&cfg);
    let samples = SampleSet::from_pixels(object_pixels(&data, 6), cfg.samples_per_ray, 0.5);
    let (rep, g) = evaluate(&model, &data, &samples, &settings(&cfg), true).unwrap();
    assert!(rep.uncertainty > 0.0);
    let g = g.unwrap();
    for (id, t) in model.store.tensors() {
        let nz = g.get(id).is_some_and(|v| v.iter().any(|x| *x != 0.0));
        if t.group == Group::Uncertainty {
            continue;
        }
        assert!(!nz, "{} received gradient", t.name);
    }
    assert!(g.sparse_entries().is_empty());
}

#[test]
fn rigid_motion_has_no_cycle_error() {
    let cfg = FitConfig::tiny();
    let (data, model) = setup(&cfg);
    // body MLP outputs start at zero, so every ΔJ is the identity
    let samples = SampleSet::from_pixels(object_pixels(&data, 6), cfg.samples_per_ray, 0.5);
    let (rep, _) = evaluate(&model, &data, &samples, &settings(&cfg), false).unwrap();
    assert!(rep.cycle_3d < 1e-24, "{}", rep.cycle_3d);
}

#[test]
fn match_gradient_reaches_warp_and_embedding() {
    let mut cfg = FitConfig::tiny();
    cfg.weights = crate::config::LossWeights {
        rgb: 0.0,
        sil: 0.0,
        flow: 0.0,
        matching: 1.0,
        cycle_2d: 0.0,
        cycle_3d: 0.0,
        uncertainty: 0.0,
    };
    let (data, model) = setup(&cfg);
    let samples = SampleSet::from_pixels(object_pixels(&data, 6), cfg.samples_per_ray, 0.5);
    let (rep, g) = evaluate(&model, &data, &samples, &settings(&cfg), true).unwrap();
    assert!(rep.feature_rays > 0 && rep.matching > 0.0);
    let g = g.unwrap();
    let nz = |name: &str| {
        let id = model.store.id(name).unwrap();
        g.get(id).is_some_and(|v| v.iter().any(|x| *x != 0.0))
    };
    assert!(nz("sdf.l0.w") && nz("root.l1.w"), "warp path");
    assert!(nz("embed.l0.w"), "embedding path");
    assert!(!g.sparse_entries().is_empty(), "pixel embeddings");
}
