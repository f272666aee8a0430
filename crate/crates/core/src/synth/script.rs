use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{rodrigues, Camera, Mat3, Rigid, Se3, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub bone: usize,
    pub color: [f64; 3],
}

impl Capsule {
    pub fn closest_on_axis(&self, x: &Vec3) -> Vec3 {
        let ba = self.b - self.a;
        let len2 = ba.norm_squared();
        if len2 == 0.0 {
            return self.a;
        }
        let h = ((x - self.a).dot(&ba) / len2).clamp(0.0, 1.0);
        self.a + ba * h
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        (x - self.closest_on_axis(x)).norm() - self.radius
    }

    /// Distance along a unit-direction ray to the first surface hit.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = sphere_hit(o, d, &self.a, self.radius);
        let b_hit = sphere_hit(o, d, &self.b, self.radius);
        if let Some(s) = b_hit {
            best = Some(best.map_or(s, |t| t.min(s)));
        }
        let ba = self.b - self.a;
        let baba = ba.norm_squared();
        if baba > 1e-18 {
            let oa = o - self.a;
            let bard = ba.dot(d);
            let baoa = ba.dot(&oa);
            let rdoa = d.dot(&oa);
            let qa = baba - bard * bard;
            if qa > 1e-12 * baba {
                let qb = baba * rdoa - baoa * bard;
                let qc = baba * oa.norm_squared() - baoa * baoa - self.radius * self.radius * baba;
                let h = qb * qb - qa * qc;
                if h >= 0.0 {
                    let s = (-qb - h.sqrt()) / qa;
                    let y = baoa + s * bard;
                    if s > 0.0 && y > 0.0 && y < baba {
                        best = Some(best.map_or(s, |t| t.min(s)));
                    }
                }
            }
        }
        best
    }

    pub fn area(&self) -> f64 {
        let r = self.radius;
        4.0 * PI * r * r + 2.0 * PI * r * (self.b - self.a).norm()
    }

    /// Albedo at a rest-pose surface point: the base colour with a stripe
    /// pattern along the capsule axis.
    pub fn albedo(&self, x: &Vec3) -> [f64; 3] {
        let ba = self.b - self.a;
        let axis = if ba.norm() > 1e-9 {
            ba.normalize()
        } else {
            Vec3::new(1.0, 1.0, 0.0).normalize()
        };
        let m = 0.7 + 0.3 * (0.5 + 0.5 * (9.0 * (x - self.a).dot(&axis)).sin());
        self.color.map(|c| c * m)
    }
}

fn sphere_hit(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let h = b * b - (oc.norm_squared() - r * r);
    if h < 0.0 {
        return None;
    }
    let s = -b - h.sqrt();
    (s > 0.0).then_some(s)
}

/// Scripted bone motion: a rotation by `amplitude·sin(2π·cycles·i/n + phase)`
/// about `axis` through `pivot`. Zero amplitude is a static bone.
#[derive(Clone, Debug, PartialEq)]
pub struct Hinge {
    pub pivot: Vec3,
    pub axis: Vec3,
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl Hinge {
    pub fn fixed() -> Hinge {
        Hinge {
            pivot: Vec3::zeros(),
            axis: Vec3::z(),
            amplitude: 0.0,
            cycles: 0.0,
            phase: 0.0,
        }
    }

    pub fn angle(&self, i: usize, frames: usize, video_phase: f64) -> f64 {
        let u = i as f64 / frames as f64;
        self.amplitude * (2.0 * PI * self.cycles * u + self.phase + video_phase).sin()
    }

    pub fn transform(&self, angle: f64) -> Rigid {
        let r = rodrigues(&(self.axis.normalize() * angle));
        Rigid::new(r, self.pivot - r * self.pivot)
    }
}

/// Camera orbit of one video: azimuth about the object's y axis advancing by
/// `azimuth_step` per frame at a fixed elevation.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScript {
    pub frames: usize,
    pub azimuth: f64,
    pub azimuth_step: f64,
    pub elevation: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneScript {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    pub seed: u64,
    pub bones: Vec<Hinge>,
    pub capsules: Vec<Capsule>,
    pub videos: Vec<VideoScript>,
}

impl SceneScript {
    /// The same scene at `size × size` pixels (focal scaled to keep the
    /// field of view) with `frames` frames per video.
    pub fn resized(&self, size: usize, frames: usize) -> SceneScript {
        let mut s = self.clone();
        s.focal *= size as f64 / self.width as f64;
        s.width = size;
        s.height = size;
        for v in &mut s.videos {
            v.frames = frames;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("scene {}: {m}", self.name)));
        if self.width == 0 || self.height == 0 || self.focal <= 0.0 || self.distance <= 0.0 {
            return bad("image size, focal length and distance must be positive".into());
        }
        if self.videos.is_empty() {
            return bad("no videos".into());
        }
        for (v, vid) in self.videos.iter().enumerate() {
            if vid.frames < 2 {
                return bad(format!("video {v} has {} frames (< 2)", vid.frames));
            }
        }
        for (k, c) in self.capsules.iter().enumerate() {
            if !(c.radius > 0.0) {
                return bad(format!("capsule {k} radius {} is not positive", c.radius));
            }
            if c.bone >= self.bones.len() {
                return bad(format!("capsule {k} bone {} out of range", c.bone));
            }
        }
        for (b, h) in self.bones.iter().enumerate() {
            if h.amplitude != 0.0 && h.axis.norm() < 1e-12 {
                return bad(format!("bone {b} has a zero hinge axis"));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames).sum()
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Object-to-camera transform of frame `i` of video `v`.
    pub fn root_pose(&self, v: usize, i: usize) -> Se3 {
        let vid = &self.videos[v];
        let az = vid.azimuth + vid.azimuth_step * i as f64;
        let r: Mat3 =
            rodrigues(&Vec3::new(vid.elevation, 0.0, 0.0)) * rodrigues(&Vec3::new(0.0, az, 0.0));
        Se3::from_rigid(&Rigid::new(r, Vec3::new(0.0, 0.0, self.distance)))
    }

    /// Rest-to-posed transform of every bone in object space.
    pub fn bone_transforms(&self, v: usize, i: usize) -> Vec<Rigid> {
        let vid = &self.videos[v];
        self.bones
            .iter()
            .map(|h| h.transform(h.angle(i, vid.frames, vid.phase)))
            .collect()
    }

    /// Analytic SDF of the rest-pose assembly.
    pub fn rest_sdf(&self, x: &Vec3) -> f64 {
        self.capsules
            .iter()
            .map(|c| c.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Analytic SDF in object space of the assembly posed by `bones`.
    pub fn posed_sdf(&self, bones_inv: &[Rigid], x: &Vec3) -> f64 {
        self.capsules
            .iter()
            .map(|c| c.sdf(&bones_inv[c.bone].apply(x)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Radius of a ball about the origin that contains every pose.
    pub fn reach(&self) -> f64 {
        self.capsules
            .iter()
            .map(|c| {
                let own = &self.bones[c.bone];
                let far = |p: &Vec3| (p - own.pivot).norm() + own.pivot.norm();
                far(&c.a).max(far(&c.b)) + c.radius
            })
            .fold(0.0, f64::max)
    }

    pub fn fixture(name: &str) -> Result<SceneScript> {
        let s = match name {
            "pendulum" => pendulum(),
            "quadruped" => quadruped(),
            "rigid-sphere" => rigid_sphere(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown scene {name:?} (pendulum, quadruped, rigid-sphere)"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v3 = |v: &Vec3| format!("{} {} {}", v.x, v.y, v.z);
        writeln!(s, "name {}", self.name).unwrap();
        writeln!(s, "image {} {}", self.width, self.height).unwrap();
        writeln!(s, "focal {}", self.focal).unwrap();
        writeln!(s, "distance {}", self.distance).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        for h in &self.bones {
            writeln!(
                s,
                "bone {} {} {} {} {}",
                v3(&h.pivot),
                v3(&h.axis),
                h.amplitude,
                h.cycles,
                h.phase
            )
            .unwrap();
        }
        for c in &self.capsules {
            writeln!(
                s,
                "capsule {} {} {} {} {} {} {}",
                v3(&c.a),
                v3(&c.b),
                c.radius,
                c.bone,
                c.color[0],
                c.color[1],
                c.color[2]
            )
            .unwrap();
        }
        for v in &self.videos {
            writeln!(
                s,
                "video {} {} {} {} {}",
                v.frames, v.azimuth, v.azimuth_step, v.elevation, v.phase
            )
            .unwrap();
        }
        s
    }

    /// Parses the line format written by [`SceneScript::to_text`]; `#` starts
    /// a comment.
    pub fn parse(text: &str) -> Result<SceneScript> {
        let mut s = SceneScript {
            name: String::new(),
            width: 0,
            height: 0,
            focal: 0.0,
            distance: 0.0,
            seed: 0,
            bones: Vec::new(),
            capsules: Vec::new(),
            videos: Vec::new(),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Dataset(format!("scene line {}: {m}: {raw:?}", n + 1));
            let mut it = line.split_whitespace();
            let key = it.next().unwrap();
            let rest: Vec<&str> = it.collect();
            let nums = |want: usize| -> Result<Vec<f64>> {
                if rest.len() != want {
                    return Err(bad(&format!("expected {want} values")));
                }
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| bad("not a number")))
                    .collect()
            };
            let count = |x: f64| -> Result<usize> {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(bad("expected a non-negative integer"))
                }
            };
            match key {
                "name" => s.name = rest.join(" "),
                "image" => {
                    let v = nums(2)?;
                    s.width = count(v[0])?;
                    s.height = count(v[1])?;
                }
                "focal" => s.focal = nums(1)?[0],
                "distance" => s.distance = nums(1)?[0],
                "seed" => {
                    s.seed = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("seed"))?
                }
                "bone" => {
                    let v = nums(9)?;
                    s.bones.push(Hinge {
                        pivot: Vec3::new(v[0], v[1], v[2]),
                        axis: Vec3::new(v[3], v[4], v[5]),
                        amplitude: v[6],
                        cycles: v[7],
                        phase: v[8],
                    });
                }
                "capsule" => {
                    let v = nums(11)?;
                    s.capsules.push(Capsule {
                        a: Vec3::new(v[0], v[1], v[2]),
                        b: Vec3::new(v[3], v[4], v[5]),
                        radius: v[6],
                        bone: count(v[7])?,
                        color: [v[8], v[9], v[10]],
                    });
                }
                "video" => {
                    let v = nums(5)?;
                    s.videos.push(VideoScript {
                        frames: count(v[0])?,
                        azimuth: v[1],
                        azimuth_step: v[2],
                        elevation: v[3],
                        phase: v[4],
                    });
                }
                _ => return Err(bad("unknown key")),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

fn capsule(a: [f64; 3], b: [f64; 3], radius: f64, bone: usize, color: [f64; 3]) -> Capsule {
    Capsule {
        a: Vec3::from(a),
        b: Vec3::from(b),
        radius,
        bone,
        color,
    }
}

fn hinge(pivot: [f64; 3], axis: [f64; 3], amplitude: f64, cycles: f64, phase: f64) -> Hinge {
    Hinge {
        pivot: Vec3::from(pivot),
        axis: Vec3::from(axis),
        amplitude,
        cycles,
        phase,
    }
}

fn pendulum() -> SceneScript {
    SceneScript {
        name: "pendulum".into(),
        width: 64,
        height: 64,
        focal: 100.0,
        distance: 3.0,
        seed: 11,
        bones: vec![
            Hinge::fixed(),
            hinge([0.0; 3], [0.0, 0.0, 1.0], 0.8, 1.0, 0.0),
        ],
        capsules: vec![
            capsule([0.0, -0.5, 0.0], [0.0, 0.0, 0.0], 0.15, 0, [0.9, 0.45, 0.2]),
            capsule([0.0, 0.0, 0.0], [0.0, 0.55, 0.0], 0.1, 1, [0.2, 0.5, 0.9]),
        ],
        videos: vec![
            VideoScript {
                frames: 16,
                azimuth: -0.4,
                azimuth_step: 0.1,
                elevation: 0.25,
                phase: 0.0,
            },
            VideoScript {
                frames: 16,
                azimuth: 0.5,
                azimuth_step: 0.1,
                elevation: -0.2,
                phase: 1.3,
            },
        ],
    }
}

fn quadruped() -> SceneScript {
    let leg = |x: f64, z: f64, bone: usize| {
        capsule([x, 0.05, z], [x, 0.45, z], 0.06, bone, [0.55, 0.4, 0.3])
    };
    let hip = |x: f64, z: f64, phase: f64| hinge([x, 0.05, z], [0.0, 0.0, 1.0], 0.5, 1.0, phase);
    SceneScript {
        name: "quadruped".into(),
        width: 64,
        height: 64,
        focal: 90.0,
        distance: 3.0,
        seed: 23,
        bones: vec![
            Hinge::fixed(),
            hinge([0.35, 0.0, 0.0], [0.0, 0.0, 1.0], 0.3, 1.0, 0.5),
            hinge([-0.35, 0.0, 0.0], [0.0, 1.0, 0.0], 0.6, 2.0, 0.0),
            hip(0.28, 0.1, 0.0),
            hip(0.28, -0.1, PI),
            hip(-0.28, 0.1, PI),
            hip(-0.28, -0.1, 0.0),
        ],
        capsules: vec![
            capsule(
                [-0.35, 0.0, 0.0],
                [0.35, 0.0, 0.0],
                0.16,
                0,
                [0.7, 0.55, 0.35],
            ),
            capsule(
                [0.35, 0.0, 0.0],
                [0.5, -0.25, 0.0],
                0.08,
                1,
                [0.75, 0.6, 0.4],
            ),
            capsule(
                [0.5, -0.3, 0.0],
                [0.72, -0.3, 0.0],
                0.1,
                1,
                [0.85, 0.7, 0.5],
            ),
            capsule(
                [0.55, -0.36, 0.0],
                [0.52, -0.48, 0.0],
                0.035,
                1,
                [0.4, 0.25, 0.2],
            ),
            capsule(
                [-0.35, 0.0, 0.0],
                [-0.7, -0.15, 0.0],
                0.05,
                2,
                [0.35, 0.25, 0.2],
            ),
            leg(0.28, 0.1, 3),
            leg(0.28, -0.1, 4),
            leg(-0.28, 0.1, 5),
            leg(-0.28, -0.1, 6),
        ],
        videos: vec![
            VideoScript {
                frames: 16,
                azimuth: 0.3,
                azimuth_step: 0.12,
                elevation: 0.3,
                phase: 0.0,
            },
            VideoScript {
                frames: 16,
                azimuth: 1.6,
                azimuth_step: 0.12,
                elevation: 0.1,
                phase: 0.8,
            },
        ],
    }
}

fn rigid_sphere() -> SceneScript {
    SceneScript {
        name: "rigid-sphere".into(),
        width: 64,
        height: 64,
        focal: 100.0,
        distance: 3.0,
        seed: 5,
        bones: vec![Hinge::fixed()],
        capsules: vec![capsule([0.0; 3], [0.0; 3], 0.4, 0, [0.8, 0.6, 0.3])],
        videos: vec![
            VideoScript {
                frames: 8,
                azimuth: 0.0,
                azimuth_step: 0.15,
                elevation: 0.2,
                phase: 0.0,
            },
            VideoScript {
                frames: 8,
                azimuth: 0.9,
                azimuth_step: 0.15,
                elevation: -0.2,
                phase: 0.0,
            },
        ],
    }
}
