use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rigsdf::config::FitConfig;
use rigsdf::fit::{shared_checksum, FitState};
use rigsdf::synth::SceneScript;
use rigsdf_cli::{content_hash, RunManifest, MANIFEST};

fn rigsdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigsdf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
}

/// A 16-pixel, 3-frame pendulum dataset and a tiny config.
fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("scene.txt");
    let small = SceneScript::fixture("pendulum").unwrap().resized(16, 3);
    std::fs::write(&script, small.to_text()).unwrap();
    let data = dir.path().join("data");
    let o = rigsdf(&["synth", s(&script), s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut cfg = FitConfig::tiny();
    cfg.iterations = 4;
    cfg.refresh_every = 2;
    let config = dir.path().join("tiny.cfg");
    std::fs::write(&config, cfg.to_text()).unwrap();
    Setup { dir, data, config }
}

fn fit(st: &Setup, out: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = st.dir.path().join(out);
    let mut args = vec![
        "--threads",
        "1",
        "fit",
        s(&st.data),
        s(&out),
        "--config",
        s(&st.config),
    ];
    args.extend_from_slice(extra);
    let o = rigsdf(&args);
    (out, o)
}

#[test]
fn synth_hash_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = rigsdf(&["synth", "rigid-sphere", s(&a)]);
    let ob = rigsdf(&["synth", "rigid-sphere", s(&b)]);
    assert_eq!(code(&oa), 0);
    assert_eq!(oa.stdout, ob.stdout);
    let hash = String::from_utf8(oa.stdout).unwrap();
    assert_eq!(hash.trim(), content_hash(&a).unwrap());
    assert_eq!(hash.trim().len(), 64);
    let m = RunManifest::parse(&std::fs::read_to_string(a.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.dataset_hash.as_deref(), Some(hash.trim()));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&rigsdf(&[])), 1);
    assert_eq!(code(&rigsdf(&["fit", "--no-such-flag"])), 1);
    assert_eq!(code(&rigsdf(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rigsdf(&["synth", "no-such-scene", s(dir.path())])), 2);
    assert_eq!(
        code(&rigsdf(&["eval", "missing.ckpt", "missing", s(dir.path())])),
        2
    );
}

#[test]
fn fit_is_deterministic_and_writes_a_manifest() {
    let st = setup();
    let (a, oa) = fit(&st, "a", &[]);
    let (b, ob) = fit(&st, "b", &[]);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&ob), 0);
    for f in ["final.ckpt", "metrics.log", "preview-000004.ppm"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let m = RunManifest::parse(&std::fs::read_to_string(a.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.command, "fit");
    assert_eq!(m.dataset_hash.unwrap(), content_hash(&st.data).unwrap());
    assert_eq!(FitConfig::parse(&m.config.unwrap()).unwrap().iterations, 4);
    let log = std::fs::read_to_string(a.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn ablation_flag_changes_the_run() {
    let st = setup();
    let (a, _) = fit(&st, "a", &[]);
    let (b, ob) = fit(&st, "b", &["--ablate", "no-flow"]);
    assert_eq!(code(&ob), 0);
    let (la, lb) = (
        std::fs::read(a.join("metrics.log")).unwrap(),
        std::fs::read(b.join("metrics.log")).unwrap(),
    );
    assert_ne!(la, lb);
    let m = std::fs::read_to_string(b.join(MANIFEST)).unwrap();
    assert!(m.contains("ablate = no-flow"), "{m}");
    assert_eq!(code(&fit(&st, "c", &["--ablate", "no-such"]).1), 2);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let st = setup();
    let (a, oa) = fit(&st, "a", &["--set", "checkpoint_every=2"]);
    assert_eq!(code(&oa), 0);
    let b = st.dir.path().join("b");
    let ckpt = a.join("ckpt-000002.ckpt");
    let ob = rigsdf(&[
        "--threads",
        "1",
        "fit",
        s(&st.data),
        s(&b),
        "--resume",
        s(&ckpt),
    ]);
    assert_eq!(code(&ob), 0, "{}", String::from_utf8_lossy(&ob.stderr));
    assert_eq!(
        std::fs::read(a.join("final.ckpt")).unwrap(),
        std::fs::read(b.join("final.ckpt")).unwrap()
    );
    let tail: Vec<String> = std::fs::read_to_string(a.join("metrics.log"))
        .unwrap()
        .lines()
        .skip(2)
        .map(String::from)
        .collect();
    let resumed: Vec<String> = std::fs::read_to_string(b.join("metrics.log"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tail, resumed);
}

#[test]
fn invalid_inputs_fail_before_optimizing() {
    let st = setup();
    let bad = st.dir.path().join("bad.cfg");
    std::fs::write(&bad, "sdf_hiden = 8\n").unwrap();
    let out = st.dir.path().join("x");
    let o = rigsdf(&["fit", s(&st.data), s(&out), "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sdf_hiden"));
    std::fs::remove_file(st.data.join("video_00").join("0001_sil.pgm")).unwrap();
    let (out, o) = fit(&st, "y", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("silhouette"));
    assert!(!out.join("metrics.log").exists());
}

#[test]
fn divergence_exits_with_three_and_dumps_state() {
    let st = setup();
    let (out, o) = fit(
        &st,
        "a",
        &["--set", "lr_network=1e300", "--set", "lr_code=1e300"],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("diverged.ckpt").exists());
}

#[test]
fn extract_render_eval_and_retarget() {
    let st = setup();
    let (run, o) = fit(&st, "run", &[]);
    assert_eq!(code(&o), 0);
    let ckpt = run.join("final.ckpt");
    let d = st.dir.path();

    let ex = d.join("extract");
    let o = rigsdf(&["extract", s(&ckpt), s(&ex), "--frames", "0,2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "canonical.ply",
        "frame_0000.ply",
        "frame_0002.ply",
        MANIFEST,
    ] {
        assert!(ex.join(f).exists(), "{f}");
    }
    assert_eq!(
        code(&rigsdf(&["extract", s(&ckpt), s(&ex), "--frames", "99"])),
        2
    );

    let re = d.join("render");
    for yaw in ["0", "30"] {
        let o = rigsdf(&["render", s(&ckpt), s(&re), "--frame", "1", "--yaw", yaw]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(re.join("frame_0001_yaw0.ppm")).unwrap();
    let b = std::fs::read(re.join("frame_0001_yaw30.ppm")).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);

    let ev = d.join("eval");
    let o = rigsdf(&[
        "eval",
        s(&ckpt),
        s(&st.data),
        s(&ev),
        "--resolution",
        "16",
        "--points",
        "200",
    ]);
    assert!(
        matches!(code(&o), 0 | 3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = std::fs::read_to_string(ev.join("eval.txt")).unwrap();
    assert!(report.contains("mean_chamfer="));

    let rt = d.join("retarget");
    let o = rigsdf(&[
        "--threads",
        "1",
        "retarget",
        s(&ckpt),
        s(&st.data),
        s(&rt),
        "--iterations",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let before = FitState::load(&ckpt).unwrap();
    let after = FitState::load(&rt.join("retarget.ckpt")).unwrap();
    assert_eq!(
        shared_checksum(&before.model),
        shared_checksum(&after.model)
    );
    assert_eq!(
        std::fs::read_to_string(rt.join("metrics.log"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn eval_requires_ground_truth() {
    let st = setup();
    let (run, _) = fit(&st, "run", &[]);
    let d = st.dir.path();
    let script = d.join("scene.txt");
    let bare = d.join("bare");
    assert_eq!(
        code(&rigsdf(&[
            "synth",
            s(&script),
            s(&bare),
            "--no-ground-truth"
        ])),
        0
    );
    let o = rigsdf(&[
        "eval",
        s(&run.join("final.ckpt")),
        s(&bare),
        s(&d.join("ev")),
    ]);
    assert_eq!(code(&o), 2);
}
