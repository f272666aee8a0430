use super::*;
use crate::geom::{icp_similarity_align, Aabb, Rigid, Se3};
use crate::nnet::LatentCodes;
use crate::warp::WarpConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere(r: f64) -> impl Fn(&Vec3) -> f64 + Sync {
    move |x: &Vec3| x.norm() - r
}

#[test]
fn sphere_vertices_near_surface() {
    let b = Aabb::cube(1.0);
    let m = marching_cubes(sphere(0.5), &b, 64).unwrap();
    let cell = 2.0 / 63.0;
    for v in &m.vertices {
        assert!((v.norm() - 0.5).abs() < 2.0 * cell);
    }
    m.validate().unwrap();
    let area = m.area();
    let exact = 4.0 * std::f64::consts::PI * 0.25;
    assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
}

#[test]
fn sphere_is_watertight() {
    for res in [8, 17, 64] {
        let m = marching_cubes(sphere(0.5), &Aabb::cube(1.0), res).unwrap();
        assert!(m.is_watertight(), "resolution {res}");
    }
}

#[test]
fn normals_point_outward() {
    let m = marching_cubes(sphere(0.5), &Aabb::cube(1.0), 24).unwrap();
    for t in &m.triangles {
        let [a, b, c] = t.map(|i| m.vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        assert!(n.dot(&(a + b + c)) > 0.0);
    }
}

#[test]
fn ambiguous_fields_stay_watertight() {
    // two touching blobs and a saddle-rich periodic field
    let blobs = |x: &Vec3| {
        let a = (x - Vec3::new(-0.26, 0.0, 0.0)).norm() - 0.25;
        let b = (x - Vec3::new(0.26, 0.01, 0.0)).norm() - 0.25;
        a.min(b)
    };
    let m = marching_cubes(blobs, &Aabb::cube(0.7), 21).unwrap();
    assert!(m.is_watertight());
    let gyroid = |x: &Vec3| {
        let s = 9.0;
        let g = (s * x.x).sin() * (s * x.y).cos()
            + (s * x.y).sin() * (s * x.z).cos()
            + (s * x.z).sin() * (s * x.x).cos();
        g.max(x.norm() - 0.8)
    };
    let m = marching_cubes(gyroid, &Aabb::cube(1.0), 33).unwrap();
    assert!(m.is_watertight());
}

#[test]
fn vertices_within_cell_diagonal_of_level_set() {
    let f = |x: &Vec3| (x - Vec3::new(0.1, 0.0, 0.0)).norm() - 0.3 + 0.05 * (7.0 * x.y).sin();
    let b = Aabb::cube(0.6);
    let res = 30;
    let m = marching_cubes(f, &b, res).unwrap();
    let diag = (b.max - b.min).norm() / (res - 1) as f64;
    for v in &m.vertices {
        assert!(f(v).abs() < diag);
    }
}

#[test]
fn constant_field_is_empty() {
    let r = marching_cubes(|_: &Vec3| 1.0, &Aabb::cube(1.0), 16);
    assert!(matches!(r, Err(Error::EmptySurface)));
    assert!(marching_cubes(sphere(0.5), &Aabb::cube(1.0), 7).is_err());
}

#[test]
fn surface_bounds_match_unit_sphere() {
    let m = marching_cubes(sphere(1.0), &Aabb::cube(1.2), 64).unwrap();
    let b = crate::embed::update_bounds_from_surface(&m.vertices).unwrap();
    let cell = 2.4 / 63.0;
    for k in 0..3 {
        assert!((b.min[k] + 1.0).abs() < cell && (b.max[k] - 1.0).abs() < cell);
    }
}

#[test]
fn chamfer_examples() {
    let a = vec![Vec3::zeros()];
    let b = vec![Vec3::new(1.0, 0.0, 0.0)];
    assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert!(matches!(chamfer(&a, &[]), Err(Error::EmptyCloud)));
}

#[test]
fn surface_samples_lie_on_mesh() {
    let m = marching_cubes(sphere(0.5), &Aabb::cube(1.0), 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = m.sample_surface(2000, &mut rng).unwrap();
    for p in &pts {
        assert!((p.norm() - 0.5).abs() < 0.02);
    }
    // area-uniform: both hemispheres get about half
    let up = pts.iter().filter(|p| p.z > 0.0).count();
    assert!((up as f64 / 2000.0 - 0.5).abs() < 0.05);
}

#[test]
fn ply_round_trip() {
    let mut m = marching_cubes(sphere(0.5), &Aabb::cube(1.0), 10).unwrap();
    m.colors = Some(m.vertices.iter().map(|v| [v.x.abs(), 0.5, 1.0]).collect());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ply");
    m.save_ply(&p).unwrap();
    let back = TriMesh::load_ply(&p).unwrap();
    assert_eq!(back.triangles, m.triangles);
    for (a, b) in back.vertices.iter().zip(&m.vertices) {
        assert_eq!(a, b);
    }
    assert_eq!(back.colors.unwrap().len(), m.vertices.len());
}

fn rigid_from(seed: u64) -> Rigid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Vec3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    );
    let t = Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    Se3::new(w, t).to_rigid()
}

proptest! {
    #[test]
    fn chamfer_symmetric_and_rigid_invariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec3> = (0..40).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let b: Vec<Vec3> = (0..25).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let d = chamfer(&a, &b).unwrap();
        prop_assert_eq!(d, chamfer(&b, &a).unwrap());
        let g = rigid_from(seed);
        let ga: Vec<Vec3> = a.iter().map(|x| g.apply(x)).collect();
        let gb: Vec<Vec3> = b.iter().map(|x| g.apply(x)).collect();
        prop_assert!((chamfer(&ga, &gb).unwrap() - d).abs() < 1e-12);
    }
}

struct Posed {
    store: ParamStore,
    def: Deformer,
    codes: LatentCodes,
}

fn posed(bones: usize) -> Posed {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = WarpConfig {
        bones,
        pose_hidden: vec![8],
        skin_hidden: vec![8],
        skin_freqs: 2,
        ..Default::default()
    };
    let def = Deformer::register(&mut store, &cfg, &mut rng).unwrap();
    let codes = LatentCodes::register(&mut store, "code", 1, 2, 0.5, &mut rng).unwrap();
    Posed { store, def, codes }
}

#[test]
fn identity_warps_keep_mesh() {
    let p = posed(3);
    let m = marching_cubes(sphere(0.4), &Aabb::cube(1.0), 16).unwrap();
    let rest = p.def.rest_state(&p.store, &p.codes);
    let fs = p
        .def
        .frame_state(&p.store, &p.codes, &rest, 0, &Se3::identity());
    let out = pose_mesh(&m, &p.def, &p.store, &rest, &fs);
    assert_eq!(out.triangles, m.triangles);
    for (a, b) in out.vertices.iter().zip(&m.vertices) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn single_bone_posing_is_rigid() {
    let mut p = posed(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mlp in [&p.def.root, &p.def.body] {
        let (w, b) = mlp.output_layer();
        for id in [w, b] {
            p.store
                .get_mut(id)
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
    }
    let m = marching_cubes(sphere(0.4), &Aabb::cube(1.0), 12).unwrap();
    let rest = p.def.rest_state(&p.store, &p.codes);
    let g0 = Se3::new(Vec3::new(0.3, 0.2, -0.1), Vec3::new(0.0, 0.0, 3.0));
    let fs = p.def.frame_state(&p.store, &p.codes, &rest, 1, &g0);
    let out = pose_mesh(&m, &p.def, &p.store, &rest, &fs);
    let n = m.vertices.len();
    for i in (0..n).step_by(7) {
        for j in (0..n).step_by(11) {
            let d0 = (m.vertices[i] - m.vertices[j]).norm();
            let d1 = (out.vertices[i] - out.vertices[j]).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
}

#[test]
fn similarity_icp_absorbs_scale() {
    let m = marching_cubes(
        |x: &Vec3| (x.x * x.x / 0.25 + x.y * x.y / 0.09 + x.z * x.z / 0.04).sqrt() - 1.0,
        &Aabb::cube(0.7),
        40,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = m.sample_surface(3000, &mut rng).unwrap();
    let b: Vec<Vec3> = a.iter().map(|x| x * 2.0).collect();
    let fit = icp_similarity_align(&a, &b, 30).unwrap();
    let moved: Vec<Vec3> = a.iter().map(|x| fit.apply(x)).collect();
    assert!(chamfer(&moved, &b).unwrap() < 1e-12);
}
