//! Pixel-to-canonical registration: per-frame pixel embeddings, the
//! canonical matching lattice and soft-argmax correspondence.

use crate::canonical::{normalize, normalize_vjp, Canonical, EmbedTape, EMBED_DIM};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::nnet::{Grads, Group, ParamId, ParamStore};
use crate::render::Image;

/// Lattice of canonical points with their embeddings.
#[derive(Clone, Debug)]
pub struct CanonicalGrid {
    pub bounds: Aabb,
    pub size: usize,
    pub points: Vec<Vec3>,
    /// `size³ × 16`, row per lattice point.
    pub embeddings: Vec<f64>,
    tapes: Vec<EmbedTape>,
}

/// Soft-argmax result and the distribution that produced it.
#[derive(Clone, Debug)]
pub struct MatchRecord {
    pub point: Vec3,
    pub probs: Vec<f64>,
    unit: Vec<f64>,
    cos: Vec<f64>,
}

/// Regular lattice including both endpoints per axis, x fastest.
pub fn lattice(bounds: &Aabb, size: usize) -> Result<Vec<Vec3>> {
    if !bounds.is_valid() {
        return Err(Error::InvalidBounds(format!("{bounds:?}")));
    }
    if size < 2 {
        return Err(Error::InvalidBounds(format!("lattice size {size} < 2")));
    }
    let step = (bounds.max - bounds.min) / (size - 1) as f64;
    let mut pts = Vec::with_capacity(size * size * size);
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                pts.push(
                    bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z),
                );
            }
        }
    }
    Ok(pts)
}

impl CanonicalGrid {
    /// Builds the lattice and evaluates MLP_ψ at every point.
    pub fn refresh(
        canonical: &Canonical,
        store: &ParamStore,
        bounds: Aabb,
        size: usize,
    ) -> Result<CanonicalGrid> {
        let points = lattice(&bounds, size)?;
        let pre = canonical.embed.cond_preact(store, &[]);
        let tapes: Vec<EmbedTape> = points
            .iter()
            .map(|p| canonical.embedding_tape(store, p, &pre))
            .collect();
        let embeddings = tapes.iter().flat_map(|t| t.unit.iter().copied()).collect();
        Ok(CanonicalGrid {
            bounds,
            size,
            points,
            embeddings,
            tapes,
        })
    }

    /// A grid with explicit embeddings (rows are normalised).
    pub fn from_embeddings(points: Vec<Vec3>, embeddings: &[Vec<f64>]) -> Result<CanonicalGrid> {
        let bounds = Aabb::of_points(&points).ok_or(Error::EmptyCloud)?;
        Ok(CanonicalGrid {
            bounds,
            size: 0,
            embeddings: embeddings.iter().flat_map(|e| normalize(e)).collect(),
            points,
            tapes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    /// `Σ_X softmax_X(α·cos(ψ, ψ(X)))·X`.
    pub fn match_soft_argmax(&self, psi: &[f64], alpha: f64) -> MatchRecord {
        let unit = normalize(psi);
        let cos: Vec<f64> = (0..self.len())
            .map(|i| {
                self.embedding(i)
                    .iter()
                    .zip(&unit)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mut probs: Vec<f64> = cos.iter().map(|c| alpha * c).collect();
        crate::warp::softmax(&mut probs);
        let point = probs
            .iter()
            .zip(&self.points)
            .fold(Vec3::zeros(), |a, (p, x)| a + x * *p);
        MatchRecord {
            point,
            probs,
            unit,
            cos,
        }
    }

    /// Returns `(∂L/∂ψ_pix, ∂L/∂α)` and adds ∂L/∂ψ(X) into `d_emb`.
    pub fn match_vjp(
        &self,
        psi: &[f64],
        alpha: f64,
        rec: &MatchRecord,
        d_point: &Vec3,
        d_emb: &mut [f64],
    ) -> (Vec<f64>, f64) {
        let dp: Vec<f64> = self.points.iter().map(|x| x.dot(d_point)).collect();
        let mean: f64 = rec.probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let mut d_unit = vec![0.0; EMBED_DIM];
        let mut d_alpha = 0.0;
        for i in 0..self.len() {
            let ds = rec.probs[i] * (dp[i] - mean);
            if ds == 0.0 {
                continue;
            }
            d_alpha += ds * rec.cos[i];
            let e = self.embedding(i);
            let de = &mut d_emb[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            for k in 0..EMBED_DIM {
                d_unit[k] += alpha * ds * e[k];
                de[k] += alpha * ds * rec.unit[k];
            }
        }
        (normalize_vjp(psi, &d_unit), d_alpha)
    }

    /// Pushes accumulated ∂L/∂ψ(X) through MLP_ψ.
    pub fn backward(
        &self,
        canonical: &Canonical,
        store: &ParamStore,
        d_emb: &[f64],
        grads: &mut Grads,
    ) {
        let mut d_pre = vec![
            0.0;
            canonical
                .embed
                .spec()
                .hidden
                .first()
                .copied()
                .unwrap_or(EMBED_DIM)
        ];
        for (i, tape) in self.tapes.iter().enumerate() {
            let d = &d_emb[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            canonical.embedding_backward(store, tape, d, &mut d_pre, grads);
        }
        canonical.embed.cond_backward(store, &[], &d_pre, grads);
    }
}

/// Axis-aligned bounds of a surface; at least two distinct vertices per
/// axis are required.
pub fn update_bounds_from_surface(vertices: &[Vec3]) -> Result<Aabb> {
    let b = Aabb::of_points(vertices).ok_or(Error::EmptySurface)?;
    if !b.is_valid() {
        return Err(Error::EmptySurface);
    }
    Ok(b)
}

/// Per-frame learnable feature images `[frames, H, W, 16]`.
#[derive(Clone, Copy, Debug)]
pub struct PixelEmbeddings {
    pub id: ParamId,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelEmbeddings {
    /// Registers unit-normalised copies of the feature images. Zero pixels
    /// stay zero.
    pub fn init(
        store: &mut ParamStore,
        features: &[&Image],
        width: usize,
        height: usize,
    ) -> Result<PixelEmbeddings> {
        let mut data = Vec::with_capacity(features.len() * width * height * EMBED_DIM);
        for (t, im) in features.iter().enumerate() {
            if im.width != width || im.height != height || im.channels != EMBED_DIM {
                return Err(Error::SizeMismatch(format!(
                    "feature image {t} is {}x{}x{}, frames are {width}x{height}x{EMBED_DIM}",
                    im.width, im.height, im.channels
                )));
            }
            for px in im.data.chunks_exact(EMBED_DIM) {
                data.extend(normalize(px));
            }
        }
        let id = store.add(
            "pixel_embed",
            &[features.len(), height, width, EMBED_DIM],
            Group::PixelEmbedding,
            data,
        )?;
        Ok(PixelEmbeddings {
            id,
            frames: features.len(),
            width,
            height,
        })
    }

    pub fn attach(store: &ParamStore) -> Result<PixelEmbeddings> {
        let id = store.require("pixel_embed")?;
        let s = &store.tensor(id).shape;
        Ok(PixelEmbeddings {
            id,
            frames: s[0],
            height: s[1],
            width: s[2],
        })
    }

    pub fn offset(&self, frame: usize, x: usize, y: usize) -> usize {
        ((frame * self.height + y) * self.width + x) * EMBED_DIM
    }

    pub fn pixel<'a>(&self, store: &'a ParamStore, frame: usize, x: usize, y: usize) -> &'a [f64] {
        let o = self.offset(frame, x, y);
        &store.get(self.id)[o..o + EMBED_DIM]
    }

    /// Re-normalises every non-zero pixel after an optimiser step.
    pub fn renormalize(&self, store: &mut ParamStore) {
        for px in store.get_mut(self.id).chunks_exact_mut(EMBED_DIM) {
            let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                px.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

#[cfg(test)]
mod tests;
