use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gflownet::experiments::{read_metrics, ExperimentConfig, CSV_HEADER};
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
name = "small"
eval_every_states = 400
sampled_l1_draws = 2000

[env]
n = 2
h = 5

[gflownet]
total_trajectories = 600
hidden = [32, 32]

[ppo]
hidden = [32, 32]
"#;

fn gfn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GFN_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = gfn(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn training_is_byte_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(&["train-gfn", "--config", "small.toml", "--seed", "3", "--out", "a"], d);
    ok(&["train-gfn", "--config", "small.toml", "--seed", "3", "--out", "b"], d);
    let a = fs::read(d.join("a/metrics.csv")).unwrap();
    let b = fs::read(d.join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(d.join("a/model.ckpt")).unwrap(), fs::read(d.join("b/model.ckpt")).unwrap());
    ok(&["train-gfn", "--config", "small.toml", "--seed", "4", "--out", "c"], d);
    assert_ne!(a, fs::read(d.join("c/metrics.csv")).unwrap());
}

#[test]
fn metrics_header_hash_matches_config_file() {
    let dir = setup();
    let d = dir.path();
    ok(&["train-gfn", "--config", "small.toml", "--out", "run"], d);
    let config = fs::read(d.join("run/config.toml")).unwrap();
    let text = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.contains(&format!("config_sha256={}", hex(&config))), "{first}");
    assert_eq!(text.lines().nth(1), Some(CSV_HEADER));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_sha256"], hex(&config));
    // The stored config reproduces the resolved settings.
    let cfg = ExperimentConfig::from_toml(std::str::from_utf8(&config).unwrap()).unwrap();
    assert_eq!(cfg.env.h, 5);
    assert_eq!(cfg.gflownet.total_trajectories, 600);
}

#[test]
fn flags_override_file_values() {
    let dir = setup();
    let d = dir.path();
    ok(&["run-mcmc", "--config", "small.toml", "--budget-states", "900", "--r0", "0.01", "--seed", "2", "--out", "m"], d);
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(d.join("m/config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.budget_states, 900);
    assert_eq!(cfg.env.r0, 0.01);
    assert_eq!(cfg.seed, 2);
    let metrics = read_metrics(&fs::read_to_string(d.join("m/metrics.csv")).unwrap()).unwrap();
    let last = metrics.rows.last().unwrap();
    assert!(last.states_visited <= 900);
    assert!(last.leaf_loss.is_none());
}

#[test]
fn checkpoint_evaluation_matches_training_summary() {
    let dir = setup();
    let d = dir.path();
    ok(&["train-gfn", "--config", "small.toml", "--out", "run"], d);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/summary.json")).unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--config", "small.toml", "--checkpoint", "run/model.ckpt"], d)).unwrap();
    let a = summary["l1_exact_mean"].as_f64().unwrap();
    let b = eval["l1_exact_mean"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-15, "{a} vs {b}");
}

#[test]
fn oracle_ppo_and_figdata_commands() {
    let dir = setup();
    let d = dir.path();
    let path = ok(&["oracle", "--config", "small.toml", "--out", "oracle"], d);
    let tables: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(path.trim())).unwrap()).unwrap();
    assert!(tables["partition_function"].as_f64().unwrap() > 0.0);

    ok(&["train-ppo", "--config", "small.toml", "--budget-states", "800", "--out", "p"], d);
    ok(&["run-mcmc", "--config", "small.toml", "--budget-states", "800", "--out", "m"], d);
    let fig = ok(&["figdata", "p/metrics.csv", "m/metrics.csv"], d);
    let mut lines = fig.lines();
    assert!(lines.next().unwrap().starts_with("states_visited,runs,"));
    assert!(lines.next().is_some());
}

#[test]
fn default_output_directory_uses_the_root() {
    let dir = setup();
    let d = dir.path();
    ok(&["run-mcmc", "--config", "small.toml", "--budget-states", "100", "--seed", "7", "--out-root", "out"], d);
    assert!(d.join("out/small-mcmc-seed7/metrics.csv").exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[env]\nwidth = 3\n").unwrap();
    let out = gfn(&["train-gfn", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    fs::write(d.join("zero.toml"), "[env]\nh = 1\n").unwrap();
    assert!(!gfn(&["train-gfn", "--config", "zero.toml"], d).status.success());
    assert!(!gfn(&["train-gfn", "--config", "missing.toml"], d).status.success());
    assert!(!gfn(&["train-gfn", "--preset", "nope"], d).status.success());
}
