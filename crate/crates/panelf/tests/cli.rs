use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn panelf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelf")).args(args).output().unwrap()
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let style = dir.path().join("style");
    summary(&panelf(&["synth", "--kind", "shape-panels", "--count", "6", "--out", arg(&style), "--caption", "CNH3000"]));
    let manifest = style.join("manifest.jsonl");
    assert!(manifest.exists());

    let base = dir.path().join("base.pnlf");
    let trained = summary(&panelf(&[
        "train-unet", "--manifest", arg(&manifest), "--out", arg(&base), "--steps", "4", "--base-channels", "8",
        "--timesteps", "10", "--beta-start", "0.1", "--beta-end", "0.9",
    ]));
    let expected: f64 = (0..10).map(|i| 1.0 - (0.1 + 0.8 * i as f64 / 9.0)).product();
    let reported = trained["alpha_bar_T"].as_f64().unwrap();
    assert!((reported - expected).abs() <= 1e-12 && reported < 0.01, "{trained}");

    let adapter = dir.path().join("style.pnlf");
    let log = dir.path().join("train.jsonl");
    summary(&panelf(&[
        "train-lora", "--manifest", arg(&manifest), "--base", arg(&base), "--steps", "4", "--out", arg(&adapter),
        "--log", arg(&log), "--log-every", "2",
    ]));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    let out = dir.path().join("out");
    summary(&panelf(&["sample", "--ckpt", arg(&adapter), "--seed", "3", "--count", "2", "--out", arg(&out)]));
    assert!(out.join("txt2img-3.png").exists() && out.join("txt2img-4.png").exists());
}

#[test]
fn failures_print_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pnlf");
    let out = panelf(&["sample", "--ckpt", arg(&missing), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string(), "{err}");
}
