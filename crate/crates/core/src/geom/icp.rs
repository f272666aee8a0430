//! Similarity ICP: nearest-neighbour pairing followed by the closed-form
//! scaled Kabsch (Umeyama) step.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;

use super::se3::{Mat3, Rigid, Se3, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub scale: f64,
    pub pose: Se3,
    /// Mean squared nearest-neighbour distance before each iteration and
    /// after the last one.
    pub history: Vec<f64>,
}

impl IcpResult {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let m = self.pose.to_rigid();
        m.r * x * self.scale + m.t
    }
}

/// Index of and squared distance to the nearest point of `cloud`.
pub fn nearest(cloud: &[Vec3], x: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in cloud.iter().enumerate() {
        let d = (p - x).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-d tree over a fixed point cloud.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(cloud: &[Vec3]) -> Result<PointIndex> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let pts: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&pts)
            .map_err(|e| Error::Dataset(format!("k-d tree construction: {e:?}")))?;
        Ok(PointIndex { tree })
    }

    /// Index of and squared distance to the nearest indexed point.
    pub fn nearest(&self, x: &Vec3) -> (usize, f64) {
        let r = self
            .tree
            .query(&[x.x, x.y, x.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        (r.item as usize, r.distance)
    }

    pub fn nearest_all(&self, src: &[Vec3]) -> Vec<(usize, f64)> {
        src.par_iter()
            .with_min_len(256)
            .map(|x| self.nearest(x))
            .collect()
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64
}

fn check_rank(pts: &[Vec3], which: &'static str) -> Result<()> {
    if pts.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mu = centroid(pts);
    let mut cov = Mat3::zeros();
    for p in pts {
        let d = p - mu;
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateCloud(which));
    }
    Ok(())
}

/// Least-squares similarity `(s, R, t)` mapping `src[i]` onto `dst[i]`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> (f64, Mat3, Vec3) {
    let n = src.len() as f64;
    let mp = centroid(src);
    let mq = centroid(dst);
    let mut sigma = Mat3::zeros();
    let mut var = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let dp = p - mp;
        sigma += (q - mq) * dp.transpose();
        var += dp.norm_squared();
    }
    sigma /= n;
    var /= n;
    let svd = sigma.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Mat3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = if var > 0.0 { trace / var } else { 1.0 };
    (scale, r, mq - r * mp * scale)
}

/// Aligns `src` to `dst` by a similarity transform.
///
/// Initialised by matching centroids and RMS radii; stops early once the
/// objective stalls.
pub fn icp_similarity_align(src: &[Vec3], dst: &[Vec3], iters: usize) -> Result<IcpResult> {
    check_rank(src, "source")?;
    check_rank(dst, "target")?;
    let ms = centroid(src);
    let md = centroid(dst);
    let rms = |pts: &[Vec3], m: &Vec3| {
        (pts.iter().map(|p| (p - m).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt()
    };
    let mut scale = rms(dst, &md) / rms(src, &ms);
    let mut r = Mat3::identity();
    let mut t = md - ms * scale;
    let mut history = Vec::with_capacity(iters + 1);
    let index = PointIndex::new(dst)?;
    let mut moved: Vec<Vec3> = Vec::with_capacity(src.len());
    for _ in 0..=iters {
        moved.clear();
        moved.extend(src.iter().map(|p| r * p * scale + t));
        let nn = index.nearest_all(&moved);
        let err = nn.iter().map(|x| x.1).sum::<f64>() / nn.len() as f64;
        let stalled = history
            .last()
            .is_some_and(|&prev: &f64| prev - err <= 1e-15 * prev.max(1e-300));
        history.push(err);
        if history.len() > iters || stalled || err == 0.0 {
            break;
        }
        let paired: Vec<Vec3> = nn.iter().map(|&(j, _)| dst[j]).collect();
        let (s2, r2, t2) = umeyama(src, &paired);
        scale = s2;
        r = r2;
        t = t2;
    }
    Ok(IcpResult {
        scale,
        pose: Se3::from_rigid(&Rigid::new(r, t)),
        history,
    })
}
