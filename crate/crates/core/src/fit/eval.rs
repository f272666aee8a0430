use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{icp_similarity_align, Aabb};
use crate::mesh::{chamfer, marching_cubes, pose_mesh, TriMesh};
use crate::model::Model;
use crate::objective::{render_image, RenderView, StepSettings};
use crate::synth::Dataset;

/// Zero level set of the canonical SDF inside the current bounds.
pub fn extract_canonical(model: &Model, resolution: usize) -> Result<TriMesh> {
    let pre = model.canonical.sdf_preact(&model.store);
    let field = |x: &crate::geom::Vec3| model.canonical.sdf_tape(&model.store, x, &pre).0;
    marching_cubes(field, &model.canonical_bounds(), resolution)
}

/// Reconstruction error of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub frame: usize,
    /// Symmetric mean squared nearest-neighbour distance after similarity
    /// alignment; `None` when the frame failed.
    pub chamfer: Option<f64>,
    /// Bounding-box diagonal of the ground-truth points.
    pub diagonal: f64,
    pub error: Option<String>,
}

impl FrameEval {
    /// `√chamfer / diagonal`.
    pub fn relative(&self) -> Option<f64> {
        self.chamfer.map(|c| c.sqrt() / self.diagonal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
}

impl EvalReport {
    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = v.collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Mean Chamfer over the frames that succeeded (NaN if none did).
    pub fn mean_chamfer(&self) -> f64 {
        Self::mean(self.frames.iter().filter_map(|f| f.chamfer))
    }

    /// Mean of [`FrameEval::relative`] over the frames that succeeded.
    pub fn mean_relative(&self) -> f64 {
        Self::mean(self.frames.iter().filter_map(FrameEval::relative))
    }

    pub fn failed(&self) -> usize {
        self.frames.iter().filter(|f| f.chamfer.is_none()).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            match (f.chamfer, &f.error) {
                (Some(c), _) => {
                    s += &format!(
                        "frame={} chamfer={c:.9e} relative={:.9e}\n",
                        f.frame,
                        f.relative().unwrap()
                    )
                }
                (None, e) => {
                    s += &format!(
                        "frame={} failed={:?}\n",
                        f.frame,
                        e.as_deref().unwrap_or("")
                    )
                }
            }
        }
        s += &format!(
            "mean_chamfer={:.9e} mean_relative={:.9e} failed={}\n",
            self.mean_chamfer(),
            self.mean_relative(),
            self.failed()
        );
        s
    }
}

/// Extracts the canonical surface once, poses it into every frame, aligns
/// `points` area-uniform samples to the ground-truth points by similarity
/// ICP and measures the Chamfer distance.
pub fn eval_reconstruction(
    model: &Model,
    data: &Dataset,
    resolution: usize,
    points: usize,
    seed: u64,
) -> Result<EvalReport> {
    if data.num_frames() != model.num_frames() {
        return Err(Error::SizeMismatch(format!(
            "{} frames in the dataset, {} in the model",
            data.num_frames(),
            model.num_frames()
        )));
    }
    let gts = data
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            f.gt_points
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("frame {t} has no ground-truth points")))
        })
        .collect::<Result<Vec<_>>>()?;
    let canonical = extract_canonical(model, resolution);
    let rest = model.rest_state();
    let frames = (0..data.num_frames())
        .into_par_iter()
        .map(|t| {
            let gt = gts[t];
            let diagonal = Aabb::of_points(gt).map_or(0.0, |b| b.diagonal());
            let run = || -> Result<f64> {
                let mesh = canonical
                    .as_ref()
                    .map_err(|e| Error::Dataset(e.to_string()))?;
                let fs = model.frame_state(&rest, t);
                let posed = pose_mesh(mesh, &model.deformer, &model.store, &rest, &fs);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let est = posed.sample_surface(points, &mut rng)?;
                let icp = icp_similarity_align(&est, gt, 40)?;
                let aligned: Vec<_> = est.iter().map(|p| icp.apply(p)).collect();
                chamfer(gt, &aligned)
            };
            match run() {
                Ok(c) => FrameEval {
                    frame: t,
                    chamfer: Some(c),
                    diagonal,
                    error: None,
                },
                Err(e) => FrameEval {
                    frame: t,
                    chamfer: None,
                    diagonal,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(EvalReport { frames })
}

/// Full-image reconstruction losses `(L_rgb, L_sil)`: every pixel of every
/// frame rendered from its training view, with the per-pixel error terms of
/// the training loss averaged over all pixels.
pub fn image_losses(
    model: &Model,
    data: &Dataset,
    samples: usize,
    s: &StepSettings,
) -> Result<(f64, f64)> {
    if data.num_frames() != model.num_frames() {
        return Err(Error::SizeMismatch(format!(
            "{} frames in the dataset, {} in the model",
            data.num_frames(),
            model.num_frames()
        )));
    }
    let (mut rgb, mut sil) = (0.0, 0.0);
    for (t, f) in data.frames.iter().enumerate() {
        let view = RenderView {
            frame: t,
            camera: model.camera(t),
            root: None,
        };
        let (c, o) = render_image(model, &view, samples, s);
        for y in 0..data.height {
            for x in 0..data.width {
                let (p, q) = (c.pixel(x, y), f.rgb.pixel(x, y));
                rgb += (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
                sil += (o.pixel(x, y)[0] - f.sil.pixel(x, y)[0]).powi(2);
            }
        }
    }
    let n = (data.num_frames() * data.width * data.height) as f64;
    Ok((rgb / n, sil / n))
}
