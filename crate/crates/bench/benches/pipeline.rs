use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigsdf::config::FitConfig;
use rigsdf::fit::FitState;
use rigsdf::geom::{Aabb, Vec3};
use rigsdf::mesh::{chamfer, marching_cubes};
use rigsdf::objective::{render_image, RenderView, StepSettings};
use rigsdf::synth::{Dataset, SceneScript};

fn pendulum(size: usize, frames: usize) -> Dataset {
    let script = SceneScript::fixture("pendulum")
        .unwrap()
        .resized(size, frames);
    Dataset::from_script(&script, false).unwrap()
}

fn desk_config() -> FitConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pendulum.cfg");
    FitConfig::load(std::path::Path::new(path)).unwrap()
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("training_step");
    g.sample_size(10);
    let tiny = pendulum(16, 3);
    let state = FitState::new(&tiny, &FitConfig::tiny()).unwrap();
    g.bench_function("tiny", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| s.step(&tiny).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let desk = pendulum(64, 16);
    let state = FitState::new(&desk, &desk_config()).unwrap();
    g.bench_function("pendulum", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| s.step(&desk).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn rendering(c: &mut Criterion) {
    let data = pendulum(32, 2);
    let state = FitState::new(&data, &desk_config()).unwrap();
    let view = RenderView {
        frame: 0,
        camera: state.model.camera(0),
        root: None,
    };
    let s = StepSettings::from_config(&state.model.config, 0.05, false);
    let mut g = c.benchmark_group("render_image");
    g.sample_size(10);
    g.bench_function("32x32", |b| {
        b.iter(|| render_image(&state.model, &view, 24, &s))
    });
    g.finish();
}

fn geometry(c: &mut Criterion) {
    let sphere = |p: &Vec3| p.norm() - 0.5;
    c.bench_function("marching_cubes/sphere_32", |b| {
        b.iter(|| marching_cubes(sphere, &Aabb::cube(1.0), 32).unwrap())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cloud = |n: usize| -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    };
    let (a, b) = (cloud(10_000), cloud(10_000));
    c.bench_function("chamfer/10k", |bench| {
        bench.iter(|| chamfer(&a, &b).unwrap())
    });
}

criterion_group!(benches, training_step, rendering, geometry);
criterion_main!(benches);
