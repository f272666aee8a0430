use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::oracle::FLOW_OFFSETS;
use super::script::SceneScript;
use crate::canonical::EMBED_DIM;
use crate::error::{Error, Result};
use crate::geom::{Camera, Se3, Vec3};
use crate::mesh::TriMesh;
use crate::render::{read_float, read_pgm, read_ppm, write_float, write_pgm, write_ppm, Image};

const MAGIC: &str = "rigsdf-dataset 1";

/// Surface samples per frame stored for evaluation.
pub const GT_POINTS: usize = 10_000;

/// One time-stamped observation.
#[derive(Clone, Debug)]
pub struct FrameObservation {
    pub video: usize,
    pub index: usize,
    pub rgb: Image,
    pub sil: Image,
    pub features: Image,
    /// Flow to frame `index + k` of the same video (channels dx, dy, valid).
    pub flows: Vec<(isize, Image)>,
    pub camera: Camera,
    pub gt_root: Option<Se3>,
    pub gt_points: Option<Vec<Vec3>>,
}

impl FrameObservation {
    pub fn flow(&self, k: isize) -> Option<&Image> {
        self.flows.iter().find(|(o, _)| *o == k).map(|(_, im)| im)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Frame count of each video; frames are numbered video by video.
    pub video_frames: Vec<usize>,
    pub frames: Vec<FrameObservation>,
    pub script: Option<SceneScript>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_videos(&self) -> usize {
        self.video_frames.len()
    }

    pub fn frame_id(&self, video: usize, index: usize) -> usize {
        self.video_frames[..video].iter().sum::<usize>() + index
    }

    /// Global id of frame `t + k` when it exists in the same video.
    pub fn offset_frame(&self, t: usize, k: isize) -> Option<usize> {
        let f = &self.frames[t];
        let j = f.index as isize + k;
        (0..self.video_frames[f.video] as isize)
            .contains(&j)
            .then(|| self.frame_id(f.video, j as usize))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.frames.is_empty() {
            return bad("dataset has no frames".into());
        }
        if self.video_frames.iter().sum::<usize>() != self.frames.len() {
            return bad("frame count does not match the video table".into());
        }
        for (t, f) in self.frames.iter().enumerate() {
            let check = |im: &Image, ch: usize, what: &str| -> Result<()> {
                if im.width != self.width || im.height != self.height || im.channels != ch {
                    return Err(Error::Dataset(format!(
                        "frame {t}: {what} is {}x{}x{}, expected {}x{}x{ch}",
                        im.width, im.height, im.channels, self.width, self.height
                    )));
                }
                Ok(())
            };
            check(&f.rgb, 3, "rgb")?;
            check(&f.sil, 1, "silhouette")?;
            check(&f.features, EMBED_DIM, "feature image")?;
            for (_, fl) in &f.flows {
                check(fl, 3, "flow")?;
            }
            if f.camera.width != self.width || f.camera.height != self.height {
                return bad(format!("frame {t}: camera size differs from the images"));
            }
            f.camera.validate()?;
            if f.sil.data.iter().any(|v| !v.is_finite())
                || f.rgb.data.iter().any(|v| !v.is_finite())
            {
                return bad(format!("frame {t}: non-finite pixel values"));
            }
        }
        Ok(())
    }

    /// Renders every frame of `script` with the analytic oracle.
    pub fn from_script(script: &SceneScript, with_ground_truth: bool) -> Result<Dataset> {
        script.validate()?;
        let mut frames = Vec::with_capacity(script.num_frames());
        for (v, vid) in script.videos.iter().enumerate() {
            for i in 0..vid.frames {
                let o = script.render_frame(v, i);
                frames.push(FrameObservation {
                    video: v,
                    index: i,
                    rgb: o.rgb.quantized(),
                    sil: o.sil,
                    features: o.features.to_f32_precision(),
                    flows: o
                        .flows
                        .into_iter()
                        .map(|(k, im)| (k, im.to_f32_precision()))
                        .collect(),
                    camera: o.camera,
                    gt_root: Some(o.root),
                    gt_points: with_ground_truth.then(|| script.surface_points(v, i, GT_POINTS)),
                });
            }
        }
        let ds = Dataset {
            name: script.name.clone(),
            width: script.width,
            height: script.height,
            video_frames: script.videos.iter().map(|v| v.frames).collect(),
            frames,
            script: Some(script.clone()),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the dataset; with `mesh_resolution` set, a marching-cubes mesh
    /// of each posed ground-truth surface is written as well.
    pub fn export(&self, dir: &Path, mesh_resolution: Option<usize>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = String::new();
        writeln!(m, "{MAGIC}").unwrap();
        writeln!(m, "name {}", self.name).unwrap();
        writeln!(m, "image {} {}", self.width, self.height).unwrap();
        writeln!(m, "videos {}", self.num_videos()).unwrap();
        for (v, n) in self.video_frames.iter().enumerate() {
            writeln!(m, "video {v} {n}").unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), m)?;
        if let Some(s) = &self.script {
            std::fs::write(dir.join("scene.txt"), s.to_text())?;
        }
        for v in 0..self.num_videos() {
            let vdir = video_dir(dir, v);
            std::fs::create_dir_all(&vdir)?;
            let frames: Vec<&FrameObservation> =
                self.frames.iter().filter(|f| f.video == v).collect();
            let mut cams = String::new();
            let mut poses = String::new();
            for f in &frames {
                let c = &f.camera;
                writeln!(cams, "{} {} {} {}", c.fx, c.fy, c.cx, c.cy).unwrap();
                if let Some(p) = &f.gt_root {
                    let a = p.to_array();
                    writeln!(
                        poses,
                        "{} {} {} {} {} {}",
                        a[0], a[1], a[2], a[3], a[4], a[5]
                    )
                    .unwrap();
                }
            }
            std::fs::write(vdir.join("cameras.txt"), cams)?;
            if frames.iter().all(|f| f.gt_root.is_some()) {
                std::fs::write(vdir.join("poses.txt"), poses)?;
            }
            for f in &frames {
                let p = |suffix: &str| vdir.join(format!("{:04}_{suffix}", f.index));
                write_ppm(&p("rgb.ppm"), &f.rgb)?;
                write_pgm(&p("sil.pgm"), &f.sil)?;
                write_float(&p("feat.f32"), &f.features)?;
                for (k, im) in &f.flows {
                    write_float(&p(&format!("flow_{}.f32", offset_tag(*k))), im)?;
                }
                if let Some(pts) = &f.gt_points {
                    TriMesh::new(pts.clone(), Vec::new()).save_ply(&p("points.ply"))?;
                }
                if let (Some(res), Some(s)) = (mesh_resolution, &self.script) {
                    s.posed_mesh(v, f.index, res)?.save_ply(&p("mesh.ply"))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = read_text(&dir.join("manifest.txt"))?;
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", dir.join("manifest.txt").display()));
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a dataset manifest"));
        }
        let mut name = String::new();
        let (mut width, mut height) = (0, 0);
        let mut video_frames = Vec::new();
        for l in lines {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t.as_slice() {
                ["name", rest @ ..] => name = rest.join(" "),
                ["image", w, h] => {
                    width = w.parse().map_err(|_| bad("image width"))?;
                    height = h.parse().map_err(|_| bad("image height"))?;
                }
                ["videos", _] => {}
                ["video", v, n] => {
                    let v: usize = v.parse().map_err(|_| bad("video id"))?;
                    if v != video_frames.len() {
                        return Err(bad("videos must be listed in order"));
                    }
                    video_frames.push(n.parse().map_err(|_| bad("frame count"))?);
                }
                [] => {}
                _ => return Err(bad(&format!("unrecognised line {l:?}"))),
            }
        }
        let script = match std::fs::read_to_string(dir.join("scene.txt")) {
            Ok(text) => Some(SceneScript::parse(&text)?),
            Err(_) => None,
        };
        let mut frames = Vec::new();
        for (v, &n) in video_frames.iter().enumerate() {
            let vdir = video_dir(dir, v);
            let cams = read_rows(&vdir.join("cameras.txt"), 4)?;
            if cams.len() != n {
                return Err(Error::Dataset(format!(
                    "{}: {} cameras for {n} frames",
                    vdir.display(),
                    cams.len()
                )));
            }
            let poses = match vdir.join("poses.txt") {
                p if p.exists() => Some(read_rows(&p, 6)?),
                _ => None,
            };
            if poses.as_ref().is_some_and(|rows| rows.len() != n) {
                return Err(Error::Dataset(format!(
                    "{}: pose count differs from frame count",
                    vdir.display()
                )));
            }
            for i in 0..n {
                let p = |suffix: &str| vdir.join(format!("{i:04}_{suffix}"));
                let need = |path: PathBuf, what: &str| -> Result<PathBuf> {
                    if path.exists() {
                        Ok(path)
                    } else {
                        Err(Error::Dataset(format!(
                            "missing {what}: {}",
                            path.display()
                        )))
                    }
                };
                let rgb = read_ppm(&need(p("rgb.ppm"), "rgb image")?)?;
                let sil = read_pgm(&need(p("sil.pgm"), "silhouette")?)?;
                let features = read_float(&need(p("feat.f32"), "feature image")?)?;
                let mut flows = Vec::new();
                for k in FLOW_OFFSETS {
                    let path = p(&format!("flow_{}.f32", offset_tag(k)));
                    if path.exists() {
                        flows.push((k, read_float(&path)?));
                    }
                }
                let c = &cams[i];
                let camera = Camera::new(c[0], c[1], c[2], c[3], width, height)?;
                let gt_points = match p("points.ply") {
                    path if path.exists() => Some(TriMesh::load_ply(&path)?.vertices),
                    _ => None,
                };
                frames.push(FrameObservation {
                    video: v,
                    index: i,
                    rgb,
                    sil,
                    features,
                    flows,
                    camera,
                    gt_root: poses.as_ref().map(|rows| Se3::from_slice(&rows[i])),
                    gt_points,
                });
            }
        }
        let ds = Dataset {
            name,
            width,
            height,
            video_frames,
            frames,
            script,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn offset_tag(k: isize) -> String {
    if k >= 0 {
        format!("p{k}")
    } else {
        format!("m{}", -k)
    }
}

fn video_dir(root: &Path, v: usize) -> PathBuf {
    root.join(format!("video_{v:02}"))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Dataset(format!("{}: bad number in {l:?}", path.display())))?;
            if row.len() != width {
                return Err(Error::Dataset(format!(
                    "{}: expected {width} values per row",
                    path.display()
                )));
            }
            Ok(row)
        })
        .collect()
}
