use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgseg"))
        .args(args)
        .env("HGSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hgseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_MODEL: &str = "[model]
d = 16
heads = 2
ffn_hidden = 16
queries = 4
classes = 3
iterations = 2
backbone_channels = [8, 8, 16, 16]

[train]
batch = 2
lr = 0.001
";

#[test]
fn gen_train_eval_viz() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&[
        "gen",
        "--out",
        p(&data),
        "--train",
        "4",
        "--val",
        "2",
        "--test",
        "2",
        "--hw",
        "32x64",
        "--classes",
        "3",
    ]);
    assert!(out.contains("train: 4 scenes"));
    assert!(data.join("val/manifest.json").exists());

    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let run = dir.path().join("run");
    let out = ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--config",
        p(&cfg),
        "--iters",
        "3",
    ]);
    assert!(out.contains("iters = 3"), "config is echoed:\n{out}");
    assert!(out.contains("parameters (Hierarchical)") && out.contains("parameters (Flat)"));
    for f in [
        "ckpt/last.hgck",
        "logs/train.jsonl",
        "logs/val_metrics.json",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("ckpt/last.hgck");
    let out = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--split",
        "test",
        "--per-iter",
        "--out",
        p(&run),
        "--save-preds",
    ]);
    assert!(out.contains("ensemble"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("preds/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["entries"].as_array().unwrap().len(), 3 + 2);
    assert!(run.join("preds/000001.ppm").exists());

    let json = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--mode",
        "whole",
        "--corruption",
        "fog_tint:3",
    ]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["entries"][0]["corruption"], "fog_tint:3");
    assert_eq!(v["entries"][0]["mode"], "whole");

    let image = data.join("test/000000.ppm");
    let viz = dir.path().join("viz");
    let out = ok(&[
        "viz",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&image),
        "--out",
        p(&viz),
    ]);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn random_weight_viz_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--out",
        p(&data),
        "--train",
        "1",
        "--val",
        "0",
        "--test",
        "0",
    ]);
    let image = data.join("train/000000.ppm");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "viz",
        "--random-weights",
        "--seed",
        "3",
        "--image",
        p(&image),
        "--out",
        p(&a),
    ]);
    ok(&[
        "viz",
        "--random-weights",
        "--seed",
        "3",
        "--image",
        p(&image),
        "--out",
        p(&b),
    ]);
    for f in ["parts.ppm", "masks.pgm", "labels.ppm"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn baseline_reports_flat_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--out",
        p(&data),
        "--train",
        "2",
        "--val",
        "1",
        "--test",
        "0",
        "--hw",
        "32x32",
        "--classes",
        "3",
    ]);
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let run = dir.path().join("run");
    let out = ok(&[
        "baseline",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--config",
        p(&cfg),
        "--iters",
        "1",
    ]);
    assert!(out.contains("grouping = \"flat\""));
    assert!(out.contains("val whole"));
    assert!(!out.contains("val part"));
}

#[test]
fn bad_arguments_fail() {
    assert!(!hgseg(&["gen", "--out", "x", "--bogus"]).status.success());
    assert!(
        !hgseg(&["eval", "--ckpt", "missing.hgck", "--data", "nowhere"])
            .status
            .success()
    );
    assert!(!hgseg(&["train"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = hgseg(&["train", "--data", "d", "--out", "o", "--config", p(&cfg)]);
    assert!(!out.status.success());
}
