//! Subcommands of the `rigsdf` binary: dataset synthesis, fitting, mesh
//! extraction, rendering, retargeting and evaluation. Every run directory
//! receives a `run.manifest` recording its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use rigsdf::config::FitConfig;
use rigsdf::fit::{eval_reconstruction, extract_canonical, run, FitState, RunOutput};
use rigsdf::geom::{rodrigues, Rigid, Vec3};
use rigsdf::mesh::pose_mesh;
use rigsdf::model::Model;
use rigsdf::objective::{render_image, RenderView, StepSettings};
use rigsdf::render::{write_pgm, write_ppm};
use rigsdf::synth::{Dataset, SceneScript};
use rigsdf::Error;

/// File name of the manifest written into every run directory.
pub const MANIFEST: &str = "run.manifest";

#[derive(Debug, Parser)]
#[command(
    name = "rigsdf",
    version,
    about = "Articulated implicit shape reconstruction from video"
)]
pub struct Cli {
    /// Worker threads; 1 is the determinism reference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from a fixture name or scene file.
    Synth(SynthArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Extract canonical and posed meshes from a checkpoint.
    Extract(ExtractArgs),
    /// Render a frame, optionally from a rotated viewpoint.
    Render(RenderArgs),
    /// Fit only the pose and lighting codes of a trained model to a driving dataset.
    Retarget(RetargetArgs),
    /// Compare posed reconstructions against ground-truth surfaces.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Fixture name (pendulum, quadruped, rigid-sphere) or scene file path.
    pub script: String,
    pub out: PathBuf,
    /// Omit ground-truth poses and surface points.
    #[arg(long)]
    pub no_ground_truth: bool,
    /// Also write posed ground-truth meshes at this grid resolution.
    #[arg(long)]
    pub mesh_resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Disable a component (no-feature, no-flow, no-active, no-root-init, no-delta, no-gauss).
    #[arg(long)]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from a checkpoint of an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    /// Frames to pose the canonical mesh into.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    /// Marching-cubes resolution; defaults to the checkpoint's.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Rotation of the object about its vertical axis, in degrees.
    #[arg(long, default_value_t = 0.0)]
    pub yaw: f64,
    /// Samples per ray; defaults to the checkpoint's.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 10_000)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failed subcommand with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Numerical failures exit with 3, everything else with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DivergedLoss { .. }
        | Error::NonPositiveDepth(_)
        | Error::DegenerateCloud(_)
        | Error::InvalidNearFar { .. }
        | Error::LowOpacity(_)
        | Error::DegenerateDepths
        | Error::EmptySurface
        | Error::EmptyCloud => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message,
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Inputs of one run, written as `key = value` lines followed by the
/// config snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub dataset_hash: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    pub extra: BTreeMap<String, String>,
    pub config: Option<String>,
}

impl RunManifest {
    fn new(command: &str, output: &Path, seed: u64) -> RunManifest {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            dataset: None,
            dataset_hash: None,
            checkpoint: None,
            output: output.to_path_buf(),
            extra: BTreeMap::new(),
            config: None,
        }
    }

    fn with_dataset(mut self, dir: &Path) -> std::io::Result<RunManifest> {
        self.dataset_hash = Some(content_hash(dir)?);
        self.dataset = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "version = {}", self.version).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        if let Some(d) = &self.dataset {
            writeln!(s, "dataset = {}", d.display()).unwrap();
        }
        if let Some(h) = &self.dataset_hash {
            writeln!(s, "dataset_sha256 = {h}").unwrap();
        }
        if let Some(c) = &self.checkpoint {
            writeln!(s, "checkpoint = {}", c.display()).unwrap();
        }
        writeln!(s, "output = {}", self.output.display()).unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "{k} = {v}").unwrap();
        }
        if let Some(c) = &self.config {
            s += "[config]\n";
            s += c;
        }
        s
    }

    /// Parses [`RunManifest::to_text`] output.
    pub fn parse(text: &str) -> Result<RunManifest, String> {
        let (head, config) = match text.split_once("[config]\n") {
            Some((h, c)) => (h, Some(c.to_string())),
            None => (text, None),
        };
        let mut m = RunManifest::new("", Path::new(""), 0);
        m.config = config;
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| format!("bad manifest line {line:?}"))?;
            match k {
                "command" => m.command = v.into(),
                "version" => m.version = v.into(),
                "seed" => m.seed = v.parse().map_err(|_| format!("bad seed {v:?}"))?,
                "dataset" => m.dataset = Some(v.into()),
                "dataset_sha256" => m.dataset_hash = Some(v.into()),
                "checkpoint" => m.checkpoint = Some(v.into()),
                "output" => m.output = v.into(),
                _ => {
                    m.extra.insert(k.into(), v.into());
                }
            }
        }
        Ok(m)
    }

    fn write(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.output)?;
        std::fs::write(self.output.join(MANIFEST), self.to_text())
    }
}

/// SHA-256 over the relative paths and bytes of every file below `dir`
/// (run manifests excluded), in sorted path order.
pub fn content_hash(dir: &Path) -> std::io::Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let name = f.to_string_lossy().replace('\\', "/");
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = std::fs::read(dir.join(&f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Parses arguments and runs the subcommand, returning the process exit
/// code. Messages go to stdout (results) and stderr (errors).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let go = move || match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Extract(a) => extract(a),
        Command::Render(a) => render(a),
        Command::Retarget(a) => retarget(a),
        Command::Eval(a) => eval(a),
    };
    match cli.threads {
        Some(0) => Err(usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| usage(e.to_string()))?
            .install(go),
        None => go(),
    }
}

fn io(e: std::io::Error) -> Failure {
    Error::Io(e).into()
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let path = Path::new(&a.script);
    let script = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(io)?;
        SceneScript::parse(&text)?
    } else {
        SceneScript::fixture(&a.script)?
    };
    let data = Dataset::from_script(&script, !a.no_ground_truth)?;
    data.export(&a.out, a.mesh_resolution)?;
    let mut m = RunManifest::new("synth", &a.out, 0)
        .with_dataset(&a.out)
        .map_err(io)?;
    m.extra.insert("script".into(), a.script.clone());
    m.write().map_err(io)?;
    println!("{}", m.dataset_hash.unwrap());
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<FitState> {
    Ok(FitState::load(path)?)
}

fn fit(a: FitArgs) -> CliResult<()> {
    let data = Dataset::load(&a.dataset)?;
    let state = match &a.resume {
        Some(ckpt) => {
            if a.config.is_some()
                || !a.overrides.is_empty()
                || !a.ablate.is_empty()
                || a.seed.is_some()
            {
                return Err(usage(
                    "--resume takes its settings from the checkpoint".into(),
                ));
            }
            load_checkpoint(ckpt)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => FitConfig::load(p)?,
                None => FitConfig::default(),
            };
            for kv in &a.overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            for name in &a.ablate {
                cfg.ablations.enable(name)?;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.iterations {
                cfg.iterations = n;
            }
            cfg.validate()?;
            FitState::new(&data, &cfg)?
        }
    };
    let mut m = RunManifest::new("fit", &a.out, state.model.config.seed)
        .with_dataset(&a.dataset)
        .map_err(io)?;
    m.checkpoint = a.resume.clone();
    m.extra.insert("iterations".into(), state.total.to_string());
    m.config = Some(state.model.config.to_text());
    m.write().map_err(io)?;
    let out = RunOutput {
        dir: &a.out,
        final_name: "final.ckpt",
    };
    let done = run(state, &data, Some(out))?;
    println!("{}", a.out.join("final.ckpt").display());
    println!("iterations={}", done.iteration);
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let model = &state.model;
    let res = a.resolution.unwrap_or(model.config.mesh_resolution);
    let mut m = RunManifest::new("extract", &a.out, model.config.seed);
    m.checkpoint = Some(a.checkpoint.clone());
    m.extra.insert("resolution".into(), res.to_string());
    m.extra.insert("frames".into(), format!("{:?}", a.frames));
    m.write().map_err(io)?;
    for &t in &a.frames {
        if t >= model.num_frames() {
            return Err(Error::Config(format!(
                "frame {t} out of range ({} frames)",
                model.num_frames()
            ))
            .into());
        }
    }
    let mesh = extract_canonical(model, res)?;
    mesh.save_ply(&a.out.join("canonical.ply"))?;
    let rest = model.rest_state();
    for &t in &a.frames {
        let fs = model.frame_state(&rest, t);
        pose_mesh(&mesh, &model.deformer, &model.store, &rest, &fs)
            .save_ply(&a.out.join(format!("frame_{t:04}.ply")))?;
    }
    println!(
        "vertices={} triangles={}",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

/// Training view of `frame` with the object turned `yaw_deg` about its
/// canonical vertical axis.
pub fn view(model: &Model, frame: usize, yaw_deg: f64) -> RenderView {
    let rest = model.rest_state();
    let g = model.frame_state(&rest, frame).g;
    let turn = Rigid::new(
        rodrigues(&Vec3::new(0.0, yaw_deg.to_radians(), 0.0)),
        Vec3::zeros(),
    );
    RenderView {
        frame,
        camera: model.camera(frame),
        root: (yaw_deg != 0.0).then(|| g.compose(&turn)),
    }
}

fn render(a: RenderArgs) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let model = &state.model;
    if a.frame >= model.num_frames() {
        return Err(Error::Config(format!(
            "frame {} out of range ({} frames)",
            a.frame,
            model.num_frames()
        ))
        .into());
    }
    let samples = a.samples.unwrap_or(model.config.samples_per_ray);
    let mut m = RunManifest::new("render", &a.out, model.config.seed);
    m.checkpoint = Some(a.checkpoint.clone());
    m.extra.insert("frame".into(), a.frame.to_string());
    m.extra.insert("yaw".into(), a.yaw.to_string());
    m.extra.insert("samples".into(), samples.to_string());
    m.write().map_err(io)?;
    let s = StepSettings::from_config(&model.config, state.beta(), false);
    let (rgb, sil) = render_image(model, &view(model, a.frame, a.yaw), samples, &s);
    let stem = format!("frame_{:04}_yaw{}", a.frame, a.yaw);
    write_ppm(&a.out.join(format!("{stem}.ppm")), &rgb)?;
    write_pgm(&a.out.join(format!("{stem}_sil.pgm")), &sil)?;
    println!("{}", a.out.join(format!("{stem}.ppm")).display());
    Ok(())
}

fn retarget(a: RetargetArgs) -> CliResult<()> {
    let trained = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let state = FitState::retarget(&trained.model, &data, a.iterations, a.seed)?;
    let mut m = RunManifest::new("retarget", &a.out, a.seed)
        .with_dataset(&a.dataset)
        .map_err(io)?;
    m.checkpoint = Some(a.checkpoint.clone());
    m.extra
        .insert("iterations".into(), a.iterations.to_string());
    m.config = Some(state.model.config.to_text());
    m.write().map_err(io)?;
    let out = RunOutput {
        dir: &a.out,
        final_name: "retarget.ckpt",
    };
    run(state, &data, Some(out))?;
    println!("{}", a.out.join("retarget.ckpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let mut m = RunManifest::new("eval", &a.out, a.seed)
        .with_dataset(&a.dataset)
        .map_err(io)?;
    m.checkpoint = Some(a.checkpoint.clone());
    m.extra
        .insert("resolution".into(), a.resolution.to_string());
    m.extra.insert("points".into(), a.points.to_string());
    m.write().map_err(io)?;
    let rep = eval_reconstruction(&state.model, &data, a.resolution, a.points, a.seed)?;
    let text = rep.to_text();
    std::fs::write(a.out.join("eval.txt"), &text).map_err(io)?;
    print!(
        "{}",
        text.lines()
            .last()
            .map(|l| format!("{l}\n"))
            .unwrap_or_default()
    );
    if rep.failed() == rep.frames.len() {
        return Err(Error::EmptySurface.into());
    }
    Ok(())
}
