use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pin_core::synth::GeneratorSpec;

fn pin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pin")).args(args).output().expect("binary runs")
}

fn mtpl_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mtpl.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a small run config in `dir`; returns (data, config).
fn synthetic_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = GeneratorSpec::planted(3, 3_000, &[(0, 1, 0.8)], 7);
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = dir.join("d.csv");
    let out = pin(&["synth", "--spec", s(&spec_path), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("d.schema.json")).unwrap()).unwrap();
    let config = serde_json::json!({
        "schema": schema,
        "model": {"embedding_dim": 3, "embedding_hidden": 4, "token_dim": 2, "hidden1": 6, "hidden2": 4},
        "training": {"batch_size": 64, "learning_rate": 0.005, "max_epochs": 4, "early_stopping_patience": 2}
    });
    let config_path = dir.join("config.json");
    fs::write(&config_path, config.to_string()).unwrap();
    (data, config_path)
}

#[test]
fn inspect_mtpl_config_ends_with_total() {
    let out = pin(&["inspect", "--config", s(&mtpl_config())]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().last(), Some("total 4147"));
    assert!(stdout.contains("continuous embeddings") && stdout.contains("1750"));
}

#[test]
fn usage_errors_exit_one() {
    let out = pin(&["inspect", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(pin(&["train", "--seeds", "x..3"]).status.code(), Some(1));
    assert_eq!(pin(&[]).status.code(), Some(1));
    assert_eq!(pin(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = pin(&[
        "train",
        "--config",
        s(&mtpl_config()),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let bad_model = dir.path().join("bad.json");
    fs::write(&bad_model, "{\"metadata\": {\"format\": \"other\"}}").unwrap();
    assert_eq!(pin(&["inspect", "--model", s(&bad_model)]).status.code(), Some(2));
}

#[test]
fn synth_train_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, config) = synthetic_setup(d);
    assert!(d.join("d.oracle.json").exists());
    assert!(d.join("d.csv.manifest.json").exists());
    let before = fs::read(&data).unwrap();

    let model = d.join("m.json");
    let history = d.join("h.csv");
    let out = pin(&[
        "train", "--config", s(&config), "--data", s(&data), "--out", s(&model), "--seeds", "1..2", "--jobs", "2",
        "--history", s(&history),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (m1, m2) = (d.join("m-seed1.json"), d.join("m-seed2.json"));
    assert!(m1.exists() && m2.exists() && d.join("h-seed2.csv").exists());
    assert_eq!(fs::read(&data).unwrap(), before, "inputs must not change");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("m.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2]));
    assert_eq!(manifest["output_paths"].as_array().unwrap().len(), 4);

    let out = pin(&["evaluate", "--model", s(&m1), "--model", s(&m2), "--data", s(&data), "--intercept-from", s(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("ensemble") && stdout.contains("intercept"), "{stdout}");

    let preds = d.join("p.csv");
    assert!(pin(&["predict", "--model", s(&m1), "--data", s(&data), "--out", s(&preds)]).status.success());
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 3_001);

    let grid = d.join("g.csv");
    let out = pin(&[
        "grid", "--model", s(&m1), "--data", s(&data), "--a", "x1", "--b", "2", "--resolution", "5", "--out", s(&grid),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&grid).unwrap().lines().count(), 26);
}

#[test]
fn shap_writes_one_report_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, config) = synthetic_setup(d);
    let model = d.join("m.json");
    assert!(pin(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&model)]).status.success());
    let out_dir = d.join("shap");
    let out = pin(&[
        "shap", "--model", s(&model), "--data", s(&data), "--background", "100", "--instances", "12", "--jobs", "2",
        "--out", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("explained 12 instances"));
    let reports = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("instance-"))
        .count();
    assert_eq!(reports, 12);
    assert!(out_dir.join("importance.csv").exists() && out_dir.join("manifest.json").exists());
    let out = pin(&["inspect", "--model", s(&model)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("active pairs 6/6"));
}

#[test]
fn select_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, config) = synthetic_setup(d);
    let table = d.join("t.csv");
    let out = pin(&["select", "--config", s(&config), "--data", s(&data), "--rounds", "2", "--out", s(&table)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    // 3 candidates in round 1, 2 in round 2, plus the header.
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("round,pair,baseline_loss,augmented_loss,delta"));
    let out = pin(&["select", "--config", s(&config), "--data", s(&data), "--rounds", "4", "--out", s(&table)]);
    assert_eq!(out.status.code(), Some(2));
}
