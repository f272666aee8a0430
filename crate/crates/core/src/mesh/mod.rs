//! Surface extraction, posing and the Chamfer metric.

mod mc;

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{PointIndex, Vec3};
use crate::nnet::ParamStore;
use crate::warp::{Deformer, FrameState, RestState};

pub use mc::{marching_cubes, marching_cubes_values, sample_lattice};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex RGB in [0, 1].
    pub colors: Option<Vec<[f64; 3]>>,
    /// Per-vertex colour derived from the canonical embedding.
    pub embedding_colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> TriMesh {
        TriMesh {
            vertices,
            triangles,
            colors: None,
            embedding_colors: None,
        }
    }

    /// Drops vertices no triangle references.
    pub fn compact(mut self) -> TriMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                let r = &mut remap[*i as usize];
                if *r == u32::MAX {
                    *r = verts.len() as u32;
                    verts.push(self.vertices[*i as usize]);
                }
                *i = *r;
            }
        }
        let pick = |c: Option<Vec<[f64; 3]>>| {
            c.map(|c| {
                let mut out = vec![[0.0; 3]; verts.len()];
                for (old, &new) in remap.iter().enumerate() {
                    if new != u32::MAX {
                        out[new as usize] = c[old];
                    }
                }
                out
            })
        };
        self.colors = pick(self.colors.take());
        self.embedding_colors = pick(self.embedding_colors.take());
        self.vertices = verts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Dataset(format!(
                    "triangle index out of range in {t:?}"
                )));
            }
            if self.triangle_area(t) <= 1e-12 {
                return Err(Error::Dataset(format!("degenerate triangle {t:?}")));
            }
        }
        for c in [&self.colors, &self.embedding_colors].into_iter().flatten() {
            if c.len() != self.vertices.len() {
                return Err(Error::SizeMismatch(format!(
                    "{} colours for {} vertices",
                    c.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// True when every undirected edge is used by exactly two triangles, once
    /// in each direction.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Applies `f` to every vertex; connectivity is kept.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3 + Sync + Send) -> TriMesh {
        TriMesh {
            vertices: self.vertices.par_iter().map(f).collect(),
            ..self.clone()
        }
    }

    /// `n` points drawn uniformly by surface area.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if self.triangles.is_empty() || acc <= 0.0 {
            return Err(Error::EmptySurface);
        }
        Ok((0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let k = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[k].map(|i| self.vertices[i as usize]);
                let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect())
    }

    pub fn write_ply<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let colors = self.colors.as_ref().or(self.embedding_colors.as_ref());
        writeln!(
            w,
            "ply\nformat ascii 1.0\nelement vertex {}",
            self.vertices.len()
        )?;
        writeln!(w, "property double x\nproperty double y\nproperty double z")?;
        if colors.is_some() {
            writeln!(
                w,
                "property uchar red\nproperty uchar green\nproperty uchar blue"
            )?;
        }
        writeln!(
            w,
            "element face {}\nproperty list uchar int vertex_indices\nend_header",
            self.triangles.len()
        )?;
        for (i, v) in self.vertices.iter().enumerate() {
            write!(w, "{} {} {}", v.x, v.y, v.z)?;
            if let Some(c) = colors {
                let q = c[i].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
                write!(w, " {} {} {}", q[0], q[1], q[2])?;
            }
            writeln!(w)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        self.write_ply(std::fs::File::create(path)?)
    }

    /// Reads the ASCII PLY subset written by [`TriMesh::write_ply`].
    pub fn load_ply(path: &Path) -> Result<TriMesh> {
        let text = std::fs::read_to_string(path)?;
        let bad =
            |what: &str| Error::Dataset(format!("{}: malformed ply ({what})", path.display()));
        let (header, body) = text
            .split_once("end_header\n")
            .ok_or_else(|| bad("header"))?;
        let mut nv = None;
        let mut nf = None;
        let mut has_color = false;
        for l in header.lines() {
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                ["element", "vertex", n] => nv = n.parse::<usize>().ok(),
                ["element", "face", n] => nf = n.parse::<usize>().ok(),
                ["property", "uchar", "red"] => has_color = true,
                _ => {}
            }
        }
        let (nv, nf) = (
            nv.ok_or_else(|| bad("vertex count"))?,
            nf.ok_or_else(|| bad("face count"))?,
        );
        let mut lines = body.lines();
        let mut vertices = Vec::with_capacity(nv);
        let mut colors = Vec::new();
        for _ in 0..nv {
            let vals: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("vertex"))?
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad("number")))
                .collect::<Result<_>>()?;
            if vals.len() < 3 {
                return Err(bad("vertex"));
            }
            vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
            if has_color && vals.len() >= 6 {
                colors.push([vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0]);
            }
        }
        let mut triangles = Vec::with_capacity(nf);
        for _ in 0..nf {
            let ids: Vec<u32> = lines
                .next()
                .ok_or_else(|| bad("face"))?
                .split_whitespace()
                .map(|s| s.parse::<u32>().map_err(|_| bad("index")))
                .collect::<Result<_>>()?;
            if ids.len() != 4 || ids[0] != 3 {
                return Err(bad("only triangles are supported"));
            }
            triangles.push([ids[1], ids[2], ids[3]]);
        }
        let mut mesh = TriMesh::new(vertices, triangles);
        if has_color {
            mesh.colors = Some(colors);
        }
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Maps every canonical vertex through the forward warp of frame `fs`.
pub fn pose_mesh(
    mesh: &TriMesh,
    def: &Deformer,
    store: &ParamStore,
    rest: &RestState,
    fs: &FrameState,
) -> TriMesh {
    mesh.map_vertices(|x| def.warp_forward(store, rest, fs, x).x_t)
}

/// Symmetric Chamfer distance: the mean squared nearest-neighbour distance
/// from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let one_way = |src: &[Vec3], dst: &[Vec3]| -> Result<f64> {
        let index = PointIndex::new(dst)?;
        let s: f64 = index.nearest_all(src).iter().map(|x| x.1).sum();
        Ok(s / src.len() as f64)
    };
    Ok(one_way(a, b)? + one_way(b, a)?)
}

#[cfg(test)]
mod tests;
