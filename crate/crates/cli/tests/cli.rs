use std::path::Path;
use std::process::{Command, Output};

fn stylefield(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylefield"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = stylefield(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "iterations": 40,
  "rays_per_step": 64,
  "samples_per_ray": 12,
  "field": { "hidden_width": 16, "hidden_layers": 2, "pos_frequencies": 3, "dir_frequencies": 2, "scene_bound": 4.0 }
}"#;

/// Scene generation through evaluation, all in `dir`.
fn pipeline(dir: &Path) -> String {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(&["gen-scene", "--kind", "sphere", "--views", "4", "--resolution", "16", "--seed", "3", "--out", "d"], dir);
    ok(&["stylize", "--data", "d/train", "--transform", "hue:120", "--out", "s"], dir);
    ok(&["pretrain", "--data", "d/train", "--config", "tiny.json", "--seed", "9", "--out", "ckpt"], dir);
    ok(
        &[
            "finetune", "--ckpt", "ckpt", "--style", "s", "--iters", "4", "--patch-size", "8", "--projections", "8",
            "--samples", "12", "--out", "ft",
        ],
        dir,
    );
    ok(&["eval", "--ckpt", "ft", "--data", "d/holdout", "--out", "metrics.tsv"], dir);
    std::fs::read_to_string(dir.join("metrics.tsv")).unwrap()
}

#[test]
fn gen_scene_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-scene", "--kind", "sphere", "--views", "8", "--out", "d"], dir.path());
    for split in ["train", "holdout"] {
        assert!(dir.path().join("d").join(split).join("transforms.json").is_file(), "{split}");
    }
    assert_eq!(std::fs::read_dir(dir.path().join("d/train")).unwrap().count(), 9);
    assert!(dir.path().join("d/run.json").is_file());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylefield(&["gen-scene", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(stylefield(&[], dir.path()).status.code(), Some(2));
    assert_eq!(stylefield(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_one_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylefield(&["pretrain", "--data", "missing", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("missing"), "{err}");
    let out = stylefield(&["gen-scene", "--views", "1", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_runs_emit_identical_metric_records() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (pipeline(a.path()), pipeline(b.path()));
    assert_eq!(ma, mb);
    let lines: Vec<&str> = ma.lines().collect();
    assert!(lines.iter().any(|l| l.starts_with("psnr\th_000\t")), "{ma}");
    assert!(lines.iter().any(|l| l.starts_with("warp_valid_fraction\t")), "{ma}");
    assert!(lines.iter().all(|l| l.split('\t').count() == 4));
    for file in ["ckpt/checkpoint.sfck", "ft/checkpoint.sfck", "ft/trace.tsv"] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("ckpt/run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 9);
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn render_blend_and_frame_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(&["stylize", "--data", "d/train", "--transform", "hue:240", "--out", "s2"], d);
    ok(
        &[
            "blend", "--ckpt", "ckpt", "--style", "s", "--blend-style", "s2", "--t", "0.5", "--iters", "2",
            "--patch-size", "8", "--projections", "4", "--samples", "8", "--out", "bl",
        ],
        d,
    );
    assert!(d.join("bl/checkpoint.sfck").is_file());
    let out = stylefield(&["blend", "--ckpt", "ckpt", "--style", "s", "--out", "bad"], d);
    assert_eq!(out.status.code(), Some(1));

    ok(&["render", "--ckpt", "bl", "--poses", "d/holdout", "--out", "r"], d);
    assert!(d.join("r/h_000.png").is_file() && d.join("r/h_001.png").is_file());
    ok(&["export-video-frames", "--ckpt", "ft", "--poses", "d/train", "--frames", "3", "--samples", "8", "--out", "v"], d);
    for i in 0..3 {
        assert!(d.join(format!("v/frame_{i:05}.png")).is_file());
    }
    assert!(!d.join("v/frame_00003.png").exists());

    let metrics = ok(&["eval", "--ckpt", "bl", "--data", "d/train", "--source", "d/train", "--out", "m.tsv"], d);
    assert!(metrics.contains("clip_tids\tr_000\t"), "{metrics}");
    assert!(metrics.contains("clip_dc\tall\t"), "{metrics}");
}
