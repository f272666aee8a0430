use super::*;
use crate::canonical::CanonicalConfig;
use crate::gradcheck::{check_params, max_rel_error, numeric_gradient};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    v[k] = 1.0;
    v
}

fn two_point_grid() -> CanonicalGrid {
    CanonicalGrid::from_embeddings(
        vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
        &[unit(0), unit(1)],
    )
    .unwrap()
}

#[test]
fn peaked_match() {
    let g = two_point_grid();
    assert!(g.match_soft_argmax(&unit(0), 100.0).point.norm() < 1e-3);
}

#[test]
fn symmetric_match() {
    let g = two_point_grid();
    let mut psi = unit(0);
    psi[1] = 1.0;
    let p = g.match_soft_argmax(&psi, 7.0).point;
    assert!((p - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
}

#[test]
fn zero_temperature_gives_centroid() {
    let pts = lattice(
        &Aabb::new(Vec3::new(0.0, -1.0, 2.0), Vec3::new(1.0, 1.0, 3.0)),
        3,
    )
    .unwrap();
    let embs: Vec<Vec<f64>> = (0..pts.len()).map(|i| unit(i % EMBED_DIM)).collect();
    let g = CanonicalGrid::from_embeddings(pts.clone(), &embs).unwrap();
    let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
    assert!((g.match_soft_argmax(&unit(3), 0.0).point - c).norm() < 1e-12);
}

#[test]
fn lattice_examples() {
    let pts = lattice(&Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)), 2).unwrap();
    assert_eq!(pts.len(), 8);
    for c in Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).corners() {
        assert!(pts.contains(&c));
    }
    let flat = Aabb::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0));
    assert!(matches!(lattice(&flat, 4), Err(Error::InvalidBounds(_))));
    let b = Aabb::new(Vec3::new(-1.0, 0.0, 2.0), Vec3::new(2.0, 0.5, 3.0));
    let pts = lattice(&b, 5).unwrap();
    assert_eq!(pts[1].x - pts[0].x, 3.0 / 4.0);
    assert_eq!(pts[5].y - pts[0].y, 0.5 / 4.0);
    assert_eq!(pts[25].z - pts[0].z, 1.0 / 4.0);
    assert_eq!(pts[124], b.max);
}

fn random_grid(seed: u64) -> (ParamStore, Canonical, CanonicalGrid) {
    let cfg = CanonicalConfig {
        sdf_hidden: vec![8],
        color_hidden: vec![8],
        embed_hidden: vec![16],
        point_freqs: 2,
        dir_freqs: 1,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Canonical::register(&mut store, &cfg, &mut rng).unwrap();
    let g = CanonicalGrid::refresh(&c, &store, Aabb::cube(0.5), 4).unwrap();
    (store, c, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matches_stay_in_bounds(seed in 0u64..100, psi in proptest::collection::vec(-1.0..1.0f64, EMBED_DIM), alpha in 0.0..200.0f64) {
        let (_, _, g) = random_grid(seed);
        let p = g.match_soft_argmax(&psi, alpha).point;
        prop_assert!(g.bounds.contains(&p, 1e-12));
    }

    #[test]
    fn cosine_matching_ignores_scale(seed in 0u64..100, psi in proptest::collection::vec(-1.0..1.0f64, EMBED_DIM), e in -8i32..8, k in 0.01..100.0f64) {
        let (_, _, g) = random_grid(seed);
        let base = g.match_soft_argmax(&psi, 10.0).point;
        let pow2: Vec<f64> = psi.iter().map(|v| v * 2f64.powi(e)).collect();
        prop_assert_eq!(g.match_soft_argmax(&pow2, 10.0).point, base);
        let scaled: Vec<f64> = psi.iter().map(|v| v * k).collect();
        prop_assert!((g.match_soft_argmax(&scaled, 10.0).point - base).norm() < 1e-12);
    }
}

#[test]
fn high_temperature_converges_to_argmax() {
    let (_, _, g) = random_grid(3);
    let target = 37;
    let psi = g.embedding(target).to_vec();
    let p = g.match_soft_argmax(&psi, 1e3).point;
    let spacing = (g.bounds.max.x - g.bounds.min.x) / (g.size - 1) as f64;
    assert!((p - g.points[target]).norm() / spacing < 1e-3);
}

#[test]
fn match_gradients() {
    let (mut store, c, g) = random_grid(5);
    let psi: Vec<f64> = (0..EMBED_DIM).map(|k| (k as f64 * 0.7).cos()).collect();
    let alpha = 4.0;
    let w = Vec3::new(0.3, -1.1, 0.7);
    let rec = g.match_soft_argmax(&psi, alpha);
    let mut d_emb = vec![0.0; g.len() * EMBED_DIM];
    let (d_psi, d_alpha) = g.match_vjp(&psi, alpha, &rec, &w, &mut d_emb);
    let num = numeric_gradient(&psi, 1e-6, |p| g.match_soft_argmax(p, alpha).point.dot(&w));
    assert!(max_rel_error(&d_psi, &num, 1e-8) < 1e-6);
    let h = 1e-6;
    let na = (g.match_soft_argmax(&psi, alpha + h).point.dot(&w)
        - g.match_soft_argmax(&psi, alpha - h).point.dot(&w))
        / (2.0 * h);
    assert!((na - d_alpha).abs() < 1e-6 * na.abs().max(1e-6));

    let mut grads = Grads::new(&store);
    g.backward(&c, &store, &d_emb, &mut grads);
    store.zero_grads();
    store.accumulate(&grads);
    let ids = c.embed.param_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (bounds, size) = (g.bounds, g.size);
    let rep = check_params(&mut store, &ids, 10, 1e-5, 1e-6, &mut rng, |s| {
        CanonicalGrid::refresh(&c, s, bounds, size)
            .unwrap()
            .match_soft_argmax(&psi, alpha)
            .point
            .dot(&w)
    });
    assert!(rep.max_rel < 1e-4, "{rep:?}");
}

#[test]
fn surface_bounds() {
    assert!(matches!(
        update_bounds_from_surface(&[]),
        Err(Error::EmptySurface)
    ));
    assert!(matches!(
        update_bounds_from_surface(&[Vec3::new(1.0, 2.0, 3.0)]),
        Err(Error::EmptySurface)
    ));
    let pts = [
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.0, 2.0, 3.0),
        Vec3::new(-1.0, 0.5, 1.0),
    ];
    let b = update_bounds_from_surface(&pts).unwrap();
    let shift = Vec3::new(0.5, -1.0, 2.0);
    let moved: Vec<Vec3> = pts.iter().map(|p| p + shift).collect();
    let bm = update_bounds_from_surface(&moved).unwrap();
    assert!((bm.min - (b.min + shift)).norm() < 1e-15 && (bm.max - (b.max + shift)).norm() < 1e-15);
}

#[test]
fn pixel_embedding_init() {
    let mut im = Image::new(2, 1, EMBED_DIM);
    im.pixel_mut(0, 0).copy_from_slice(&unit(4));
    let mut store = ParamStore::new();
    let pe = PixelEmbeddings::init(&mut store, &[&im], 2, 1).unwrap();
    assert_eq!(pe.pixel(&store, 0, 0, 0), unit(4).as_slice());
    assert!(pe.pixel(&store, 0, 1, 0).iter().all(|&v| v == 0.0));
    let wrong = Image::new(3, 1, EMBED_DIM);
    assert!(matches!(
        PixelEmbeddings::init(&mut ParamStore::new(), &[&wrong], 2, 1),
        Err(Error::SizeMismatch(_))
    ));

    let mut grads = Grads::new(&store);
    let mut g = vec![0.0; EMBED_DIM];
    g[5] = -1.0;
    grads.add_sparse(pe.id, pe.offset(0, 0, 0), &g);
    store.accumulate(&grads);
    store.adam_step(0.1, 0.9, 0.999, 1e-8);
    pe.renormalize(&mut store);
    let px = pe.pixel(&store, 0, 0, 0);
    assert!(px[5] > 0.0);
    assert!((px.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}
