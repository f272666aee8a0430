use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::script::SceneScript;
use crate::canonical::EMBED_DIM;
use crate::error::Result;
use crate::geom::{Aabb, Camera, Rigid, Se3, Vec3};
use crate::mesh::{marching_cubes, TriMesh};
use crate::render::Image;

/// Flow offsets rendered for every frame.
pub const FLOW_OFFSETS: [isize; 4] = [1, -1, 2, -2];

/// Posed geometry of one scripted frame.
#[derive(Clone, Debug)]
pub struct FramePose {
    pub video: usize,
    pub index: usize,
    pub root: Se3,
    pub g: Rigid,
    pub bones: Vec<Rigid>,
    pub bones_inv: Vec<Rigid>,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub capsule: usize,
    pub depth: f64,
    /// Hit point in rest-pose object coordinates.
    pub rest: Vec3,
    /// Surface normal in camera coordinates.
    pub normal: Vec3,
}

#[derive(Clone, Debug)]
pub struct OracleFrame {
    pub rgb: Image,
    pub sil: Image,
    pub features: Image,
    /// Flow to frame `index + k` for each available `k`: channels dx, dy and
    /// a validity flag.
    pub flows: Vec<(isize, Image)>,
    pub root: Se3,
    pub bones: Vec<Rigid>,
    pub camera: Camera,
}

/// Fixed affine map whose normalised output is the oracle's per-point
/// embedding.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub p: Vec<[f64; 3]>,
    pub b: Vec<f64>,
}

impl FeatureMap {
    pub fn new(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let p = (0..EMBED_DIM).map(|_| [n(), n(), n()]).collect();
        let b = (0..EMBED_DIM).map(|_| 0.5 * n()).collect();
        FeatureMap { p, b }
    }

    pub fn embed(&self, x: &Vec3) -> Vec<f64> {
        let mut e: Vec<f64> = self
            .p
            .iter()
            .zip(&self.b)
            .map(|(p, b)| p[0] * x.x + p[1] * x.y + p[2] * x.z + b)
            .collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter_mut().for_each(|v| *v /= n);
        e
    }
}

impl SceneScript {
    pub fn frame_pose(&self, video: usize, index: usize) -> FramePose {
        let root = self.root_pose(video, index);
        let bones = self.bone_transforms(video, index);
        FramePose {
            video,
            index,
            g: root.to_rigid(),
            root,
            bones_inv: bones.iter().map(Rigid::inverse).collect(),
            bones,
        }
    }

    /// First surface hit along the camera-space ray through pixel
    /// coordinates `px`.
    pub fn trace(&self, pose: &FramePose, px: [f64; 2]) -> Option<Hit> {
        let cam = self.camera();
        let d_cam = cam.unproject_depth(px).normalize();
        let g_inv = pose.g.inverse();
        let o_obj = g_inv.t;
        let d_obj = g_inv.r * d_cam;
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in self.capsules.iter().enumerate() {
            let inv = &pose.bones_inv[c.bone];
            let (o, d) = (inv.apply(&o_obj), inv.r * d_obj);
            if let Some(s) = c.intersect(&o, &d) {
                if best.is_none_or(|(_, t)| s < t) {
                    best = Some((k, s));
                }
            }
        }
        let (k, s) = best?;
        let c = &self.capsules[k];
        let inv = &pose.bones_inv[c.bone];
        let rest = inv.apply(&o_obj) + (inv.r * d_obj) * s;
        let n_rest = (rest - c.closest_on_axis(&rest)).normalize();
        let normal = pose.g.r * (pose.bones[c.bone].r * n_rest);
        Some(Hit {
            capsule: k,
            depth: s * d_cam.z,
            rest,
            normal,
        })
    }

    /// Camera-space position in frame `pose` of a rest point on capsule `k`.
    pub fn posed_point(&self, pose: &FramePose, k: usize, rest: &Vec3) -> Vec3 {
        pose.g.apply(&pose.bones[self.capsules[k].bone].apply(rest))
    }

    /// Exact flow from pixel position `px` of `from` to frame `to`, or `None`
    /// off the object.
    pub fn flow_at(&self, from: &FramePose, to: &FramePose, px: [f64; 2]) -> Option<[f64; 2]> {
        let hit = self.trace(from, px)?;
        let y = self.posed_point(to, hit.capsule, &hit.rest);
        let q = self.camera().project(&y).ok()?;
        Some([q[0] - px[0], q[1] - px[1]])
    }

    pub fn shade(&self, hit: &Hit, px: [f64; 2]) -> [f64; 3] {
        let light = -self.camera().unproject_depth(px).normalize();
        let lambert = hit.normal.dot(&light).max(0.0);
        self.capsules[hit.capsule]
            .albedo(&hit.rest)
            .map(|a| a * (0.75 + 0.25 * lambert))
    }

    pub fn render_frame(&self, video: usize, index: usize) -> OracleFrame {
        let (w, h) = (self.width, self.height);
        let cam = self.camera();
        let pose = self.frame_pose(video, index);
        let features = FeatureMap::new(self.seed);
        let frames = self.videos[video].frames as isize;
        let targets: Vec<(isize, FramePose)> = FLOW_OFFSETS
            .iter()
            .filter(|&&k| (0..frames).contains(&(index as isize + k)))
            .map(|&k| (k, self.frame_pose(video, (index as isize + k) as usize)))
            .collect();
        let rows: Vec<_> = (0..h)
            .into_par_iter()
            .map(|j| {
                let mut rgb = vec![0.0; 3 * w];
                let mut sil = vec![0.0; w];
                let mut feat = vec![0.0; EMBED_DIM * w];
                let mut flows = vec![vec![0.0; 3 * w]; targets.len()];
                for i in 0..w {
                    let px = cam.pixel_center(i, j);
                    let Some(hit) = self.trace(&pose, px) else {
                        continue;
                    };
                    sil[i] = 1.0;
                    rgb[3 * i..3 * i + 3].copy_from_slice(&self.shade(&hit, px));
                    feat[EMBED_DIM * i..EMBED_DIM * (i + 1)]
                        .copy_from_slice(&features.embed(&hit.rest));
                    for (f, (_, to)) in flows.iter_mut().zip(&targets) {
                        let y = self.posed_point(to, hit.capsule, &hit.rest);
                        if let Ok(q) = cam.project(&y) {
                            f[3 * i..3 * i + 3].copy_from_slice(&[q[0] - px[0], q[1] - px[1], 1.0]);
                        }
                    }
                }
                (rgb, sil, feat, flows)
            })
            .collect();
        let mut out = OracleFrame {
            rgb: Image::new(w, h, 3),
            sil: Image::new(w, h, 1),
            features: Image::new(w, h, EMBED_DIM),
            flows: targets
                .iter()
                .map(|(k, _)| (*k, Image::new(w, h, 3)))
                .collect(),
            root: pose.root,
            bones: pose.bones.clone(),
            camera: cam,
        };
        for (j, (rgb, sil, feat, flows)) in rows.into_iter().enumerate() {
            out.rgb.data[3 * w * j..3 * w * (j + 1)].copy_from_slice(&rgb);
            out.sil.data[w * j..w * (j + 1)].copy_from_slice(&sil);
            out.features.data[EMBED_DIM * w * j..EMBED_DIM * w * (j + 1)].copy_from_slice(&feat);
            for (dst, src) in out.flows.iter_mut().zip(flows) {
                dst.1.data[3 * w * j..3 * w * (j + 1)].copy_from_slice(&src);
            }
        }
        out
    }

    /// `n` points uniform by area on the posed surface, in camera space.
    pub fn surface_points(&self, video: usize, index: usize, n: usize) -> Vec<Vec3> {
        let pose = self.frame_pose(video, index);
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed.wrapping_mul(1_000_003) ^ ((video as u64) << 32 | index as u64),
        );
        let areas: Vec<f64> = self.capsules.iter().map(|c| c.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut u = rng.gen::<f64>() * total;
            let mut k = 0;
            while k + 1 < areas.len() && u > areas[k] {
                u -= areas[k];
                k += 1;
            }
            let c = &self.capsules[k];
            let rest = sample_capsule(c, &mut rng);
            let obj = pose.bones[c.bone].apply(&rest);
            let covered = self
                .capsules
                .iter()
                .enumerate()
                .any(|(m, o)| m != k && o.sdf(&pose.bones_inv[o.bone].apply(&obj)) < 0.0);
            if !covered {
                out.push(pose.g.apply(&obj));
            }
        }
        out
    }

    /// Marching-cubes mesh of the posed surface, in camera space.
    pub fn posed_mesh(&self, video: usize, index: usize, resolution: usize) -> Result<TriMesh> {
        let pose = self.frame_pose(video, index);
        let r = self.reach() * 1.05 + 0.05;
        let mesh = marching_cubes(
            |x| self.posed_sdf(&pose.bones_inv, x),
            &Aabb::cube(r),
            resolution,
        )?;
        Ok(mesh.map_vertices(|x| pose.g.apply(x)))
    }
}

fn sample_capsule<R: Rng>(c: &super::script::Capsule, rng: &mut R) -> Vec3 {
    let r = c.radius;
    let ba = c.b - c.a;
    let len = ba.norm();
    let cyl = 2.0 * std::f64::consts::PI * r * len;
    let sph = 4.0 * std::f64::consts::PI * r * r;
    let dir = loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    if rng.gen::<f64>() * (cyl + sph) < cyl {
        let axis = ba / len;
        let u = axis
            .cross(&if axis.x.abs() < 0.9 {
                Vec3::x()
            } else {
                Vec3::y()
            })
            .normalize();
        let v = axis.cross(&u);
        let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        c.a + ba * rng.gen::<f64>() + (u * theta.cos() + v * theta.sin()) * r
    } else {
        // hemisphere on the end the direction points away from
        let end = if len > 0.0 && dir.dot(&ba) > 0.0 {
            c.b
        } else {
            c.a
        };
        end + dir * r
    }
}
