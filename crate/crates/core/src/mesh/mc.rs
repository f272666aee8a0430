//! Marching cubes.
//!
//! The case table is derived from the cube's face structure: on every face
//! the crossings are paired so that each run of inside corners is cut off
//! on its own (ambiguous faces separate the inside corners). Neighbouring
//! cells see the same corner signs on a shared face and therefore make the
//! same choice, so the surface is closed. The per-face segments chain into
//! oriented loops, each triangulated as a fan.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Corners of each face, counter-clockwise seen from outside the cell.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

fn edge_index(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).unwrap()
}

/// Loops of cell-edge indices for one corner-sign configuration (bit `i` set
/// when corner `i` is inside).
fn case_loops(config: u8) -> Vec<Vec<usize>> {
    let inside = |c: usize| config >> c & 1 == 1;
    let mut next: HashMap<usize, usize> = HashMap::new();
    for face in FACES {
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) || !inside(b) {
                continue;
            }
            // entering the inside run at (a, b); find where it exits
            let mut j = (k + 1) % 4;
            while inside(face[(j + 1) % 4]) {
                j = (j + 1) % 4;
            }
            let exit = edge_index(face[j], face[(j + 1) % 4]);
            next.insert(edge_index(a, b), exit);
        }
    }
    let mut loops = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = [false; 12];
    for s in starts {
        if used[s] {
            continue;
        }
        let mut lp = vec![s];
        used[s] = true;
        let mut e = next[&s];
        while e != s {
            used[e] = true;
            lp.push(e);
            e = next[&e];
        }
        loops.push(lp);
    }
    loops
}

fn table() -> &'static Vec<Vec<Vec<usize>>> {
    static TABLE: OnceLock<Vec<Vec<Vec<usize>>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(case_loops).collect())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum VertexKey {
    Edge(usize, u8),
    Corner(usize),
}

/// Samples `field` on a `resolution³` lattice over `bounds` and extracts its
/// zero level set. Triangles wind counter-clockwise seen from the positive
/// side.
pub fn marching_cubes(
    field: impl Fn(&Vec3) -> f64 + Sync,
    bounds: &Aabb,
    resolution: usize,
) -> Result<TriMesh> {
    let values = sample_lattice(&field, bounds, resolution)?;
    marching_cubes_values(&values, bounds, resolution)
}

pub fn sample_lattice(
    field: &(impl Fn(&Vec3) -> f64 + Sync),
    bounds: &Aabb,
    resolution: usize,
) -> Result<Vec<f64>> {
    if resolution < 8 {
        return Err(Error::InvalidBounds(format!("resolution {resolution} < 8")));
    }
    let pts = crate::embed::lattice(bounds, resolution)?;
    Ok(pts.par_iter().with_min_len(256).map(field).collect())
}

/// Marching cubes over precomputed lattice values (x fastest).
pub fn marching_cubes_values(values: &[f64], bounds: &Aabb, n: usize) -> Result<TriMesh> {
    if !bounds.is_valid() {
        return Err(Error::InvalidBounds(format!("{bounds:?}")));
    }
    let step = (bounds.max - bounds.min) / (n - 1) as f64;
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let pos = |g: usize| {
        let (i, j, k) = (g % n, (g / n) % n, g / (n * n));
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let strides = [1, n, n * n];
    let tab = table();
    let mut verts: Vec<Vec3> = Vec::new();
    let mut map: HashMap<VertexKey, u32> = HashMap::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();
    let mut vertex = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> u32 {
        let (fa, fb) = (values[a], values[b]);
        let t = fa / (fa - fb);
        let key = if t <= 1e-12 {
            VertexKey::Corner(a)
        } else if t >= 1.0 - 1e-12 {
            VertexKey::Corner(b)
        } else {
            let (lo, hi) = (a.min(b), a.max(b));
            let axis = strides.iter().position(|&s| s == hi - lo).unwrap() as u8;
            VertexKey::Edge(lo, axis)
        };
        *map.entry(key).or_insert_with(|| {
            let p = match key {
                VertexKey::Corner(c) => pos(c),
                VertexKey::Edge(..) => pos(a) + (pos(b) - pos(a)) * t,
            };
            verts.push(p);
            (verts.len() - 1) as u32
        })
    };
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corners: [usize; 8] =
                    std::array::from_fn(|c| idx(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)));
                let mut config = 0u8;
                for (c, &g) in corners.iter().enumerate() {
                    if values[g] < 0.0 {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                for lp in &tab[config as usize] {
                    let ids: Vec<u32> = lp
                        .iter()
                        .map(|&e| {
                            let (a, b) = EDGES[e];
                            vertex(corners[a], corners[b], &mut verts)
                        })
                        .collect();
                    for m in 1..ids.len() - 1 {
                        tris.push([ids[0], ids[m], ids[m + 1]]);
                    }
                }
            }
        }
    }
    tris.retain(|t| {
        t[0] != t[1] && t[1] != t[2] && t[0] != t[2] && {
            let (a, b, c) = (
                verts[t[0] as usize],
                verts[t[1] as usize],
                verts[t[2] as usize],
            );
            (b - a).cross(&(c - a)).norm() > 2e-12
        }
    });
    if tris.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(TriMesh::new(verts, tris).compact())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_closes() {
        for c in 0..=255u8 {
            let loops = case_loops(c);
            let used: usize = loops.iter().map(Vec::len).sum();
            let crossings = EDGES
                .iter()
                .filter(|&&(a, b)| (c >> a & 1) != (c >> b & 1))
                .count();
            assert_eq!(used, crossings, "config {c:08b}");
            assert!(loops.iter().all(|l| l.len() >= 3));
        }
    }

    #[test]
    fn single_corner_is_one_triangle() {
        assert!(case_loops(0).is_empty() && case_loops(255).is_empty());
        for c in 0..8 {
            let loops = case_loops(1 << c);
            assert_eq!(loops.len(), 1);
            assert_eq!(loops[0].len(), 3);
        }
    }

    #[test]
    fn ambiguous_face_separates_inside_corners() {
        // corners 0 and 3 share the z=0 face diagonally
        let loops = case_loops(0b0000_1001);
        assert_eq!(loops.len(), 2);
    }
}
