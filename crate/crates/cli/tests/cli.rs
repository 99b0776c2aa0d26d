use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 5

[dataset]
num_classes = 2
per_class = 6
image_size = 32
augment = false

[model]
prototypes_per_class = 2
depth = 8

[train]
epochs = 2
warmup_epochs = 1
push_period = 1
batch_size = 4
head_refit_steps = 5

[retrain]
epochs = 1
warmup_epochs = 0
push_period = 1
batch_size = 4
head_refit_steps = 5

[feedback]
oracle_ratings = 16
test_fraction = 0.25

[reward]
epochs = 2

[r3]
max_candidates = 5
reweigh_steps = 3
"#;

fn r3(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r3"))
        .args(args)
        .env("R3_OUT", dir.join("out"))
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = r3(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "r3 {args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.display().to_string();
    (dir, cfg)
}

#[test]
fn scripted_pipeline_emits_three_reports() {
    let (dir, cfg) = tiny_dir();
    let d = dir.path();
    ok(d, &["-c", &cfg, "synth-gen"]);
    ok(d, &["-c", &cfg, "train"]);
    let rated = ok(d, &["-c", &cfg, "oracle-rate", "--n", "16"]);
    assert!(rated.contains("16 ratings"), "{rated}");
    ok(d, &["-c", &cfg, "build-comparisons", "--test-fraction", "0.25"]);
    ok(d, &["-c", &cfg, "train-reward"]);
    ok(d, &["-c", &cfg, "r2"]);
    ok(d, &["-c", &cfg, "r3"]);
    for stage in ["base", "r2", "r3"] {
        ok(d, &["-c", &cfg, "eval", "--stage", stage]);
        let report: Value = serde_json::from_slice(&std::fs::read(d.join(format!("out/reports/eval_{stage}.json"))).unwrap()).unwrap();
        assert_eq!(report["stage"], stage);
        let acc = report["test_accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(d.join(format!("out/reports/reward_hist_{stage}.png")).exists());
    }
    let table = std::fs::read_to_string(d.join("out/reports/stages.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");

    let ens = ok(d, &["-c", &cfg, "ensemble-eval", "--models", "base,r2,r3"]);
    assert!(ens.contains("ensemble accuracy"), "{ens}");
    let ens: Value = serde_json::from_slice(&std::fs::read(d.join("out/reports/ensemble.json")).unwrap()).unwrap();
    assert_eq!(ens["member_accuracy"].as_array().unwrap().len(), 3);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let (dir, cfg) = tiny_dir();
    let d = dir.path();
    ok(d, &["-c", &cfg, "synth-gen"]);
    let again = r3(d, &["-c", &cfg, "synth-gen"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(d, &["-c", &cfg, "--force", "synth-gen"]);
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let (dir, cfg) = tiny_dir();
    let d = dir.path();
    ok(d, &["-c", &cfg, "synth-gen"]);
    let out = ok(d, &["-c", &cfg, "train", "--epochs", "0"]);
    assert!(d.join("out/models/base.ckpt").exists());
    // Two classes with an untrained head: anything is possible, but the
    // report must be a valid accuracy.
    let acc: f64 = out.split("test accuracy ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc), "{out}");
}

#[test]
fn flags_override_the_config_file() {
    let (dir, cfg) = tiny_dir();
    let printed = ok(dir.path(), &["-c", &cfg, "--seed", "9", "print-config"]);
    let parsed: toml::Value = toml::from_str(&printed).unwrap();
    assert_eq!(parsed["seed"].as_integer(), Some(9));
    assert_eq!(parsed["dataset"]["num_classes"].as_integer(), Some(2));
    // Stage seeds follow the top-level seed.
    assert_eq!(parsed["train"]["seed"].as_integer(), Some(9));
    assert_eq!(parsed["r3"]["seed"].as_integer(), Some(12));
}

#[test]
fn subcommand_flags_override_file_values() {
    let (dir, cfg) = tiny_dir();
    ok(dir.path(), &["-c", &cfg, "synth-gen", "--per-class", "3"]);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_classes"], 2);
    assert_eq!(manifest["images"].as_array().unwrap().len(), 6);
}

#[test]
fn output_root_comes_from_the_environment() {
    let (dir, cfg) = tiny_dir();
    let printed = ok(dir.path(), &["-c", &cfg, "print-config"]);
    let parsed: toml::Value = toml::from_str(&printed).unwrap();
    assert_eq!(parsed["output_dir"].as_str().unwrap(), dir.path().join("out").display().to_string());
    let explicit = dir.path().join("elsewhere");
    let printed = ok(dir.path(), &["-c", &cfg, "--out", explicit.to_str().unwrap(), "print-config"]);
    assert!(printed.contains("elsewhere"));
}

#[test]
fn unknown_flag_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = r3(dir.path(), &["train", "--epoch", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epoch"));
}

#[test]
fn missing_files_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = r3(dir.path(), &["-c", "/nonexistent/cfg.toml", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cfg.toml"));

    let out = r3(dir.path(), &["train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json") && err.contains("synth-gen"), "{err}");

    let out = r3(dir.path(), &["ensemble-eval", "--models", "base,missing.ckpt"]);
    assert!(!out.status.success());
}

#[test]
fn invalid_config_values_are_rejected() {
    let (dir, cfg) = tiny_dir();
    let out = r3(dir.path(), &["-c", &cfg, "r2", "--alpha", "0.9"]);
    assert!(!out.status.success());
    let out = r3(dir.path(), &["-c", &cfg, "train-reward", "--fusion", "bilinear"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--fusion"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sed = 1\n").unwrap();
    let out = r3(dir.path(), &["-c", bad.to_str().unwrap(), "print-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
}
