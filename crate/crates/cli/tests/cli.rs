//! Binary behavior: exit codes, field-level errors and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn smoke() -> Value {
    serde_json::from_str(&fs::read_to_string(workspace().join("configs/smoke.json")).unwrap()).unwrap()
}

/// Writes `config` next to a copy of the benchmark model and returns its path.
fn write_config(dir: &Path, mut config: Value) -> PathBuf {
    fs::copy(workspace().join("configs/benchmark_model.json"), dir.join("benchmark_model.json")).unwrap();
    config["output_dir"] = Value::String(dir.join("out").to_string_lossy().into_owned());
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn drsls(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsls")).args(args).arg("--config").arg(config).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn invalid_rho_exits_2_naming_the_field() {
    let dir = scratch("bad-rho");
    let mut config = smoke();
    config["experiment"]["rho_grid"] = serde_json::json!([0.01, 1.2]);
    let out = drsls(&["synth"], &write_config(&dir, config));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rho_grid[1]"), "{}", stderr(&out));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = scratch("unknown-field");
    let mut config = smoke();
    config["experiment"]["horizn"] = serde_json::json!(4);
    let out = drsls(&["synth"], &write_config(&dir, config));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("horizn"), "{}", stderr(&out));
}

#[test]
fn corrupted_model_file_is_a_parse_error() {
    let dir = scratch("bad-model");
    let path = write_config(&dir, smoke());
    fs::write(dir.join("benchmark_model.json"), "{\"n\": 2, \"m\": 1,").unwrap();
    let out = drsls(&["validate"], &path);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("benchmark_model.json"), "{}", stderr(&out));
}

#[test]
fn noise_dimension_mismatch_exits_2() {
    let dir = scratch("bad-noise");
    let mut config = smoke();
    config["process_noise"] = serde_json::json!({ "lower": [-0.01], "upper": [0.01] });
    let out = drsls(&["montecarlo"], &write_config(&dir, config));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn infeasible_grid_exits_3() {
    let dir = scratch("infeasible");
    let mut config = smoke();
    // ‖Φy‖ ≥ 1 always, so σ < 1 rules out every grid point.
    config["experiment"]["sigma_grid"] = serde_json::json!([0.5]);
    let out = drsls(&["synth", "--mode", "drsls"], &write_config(&dir, config));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn synth_writes_result_and_policy() {
    let dir = scratch("synth");
    let out = drsls(&["synth", "--mode", "drsls"], &write_config(&dir, smoke()));
    assert!(out.status.success(), "{}", stderr(&out));
    let result: Value = serde_json::from_str(&fs::read_to_string(dir.join("out/synth-drsls.json")).unwrap()).unwrap();
    assert_eq!(result["command"], "synth");
    assert_eq!(result["result"]["status"], "optimal");
    assert!(result["result"]["epsilon_bar"].as_f64().unwrap() > 0.0);
    assert_eq!(result["config"]["experiment"]["seed"], 21);
    assert!(dir.join("out/policy-drsls.json").exists());
}

#[test]
fn validate_passes_on_the_smoke_problem() {
    let dir = scratch("validate");
    let out = drsls(&["validate"], &write_config(&dir, smoke()));
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{stdout}");
    assert!(dir.join("out/validation.json").exists());
}

#[test]
fn seed_flag_changes_the_innovation_samples() {
    let dir = scratch("seed");
    let path = write_config(&dir, smoke());
    let read = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_drsls"))
            .args(["sample-innovations", "--seed", seed, "--config"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read_to_string(dir.join("out/innovations.csv")).unwrap()
    };
    let (a, b, c) = (read("1"), read("2"), read("1"));
    assert!(a.starts_with("sample,t,channel,value\n"));
    // 8 samples × 5 steps × 1 channel plus the header.
    assert_eq!(a.lines().count(), 41);
    assert_ne!(a, b);
    assert_eq!(a, c);
}
