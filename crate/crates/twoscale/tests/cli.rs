//! Exit codes and console output of the installed binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn out_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("twoscale-cli-{}-{tag}", std::process::id()))
}

fn run(args: &[&str], tag: &str) -> (Output, PathBuf) {
    let dir = out_dir(tag);
    let output = Command::new(env!("CARGO_BIN_EXE_twoscale"))
        .args(args)
        .arg("--out")
        .arg(&dir)
        .output()
        .expect("spawn the binary");
    (output, dir)
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let (output, dir) = run(&["--config", "/nonexistent/twoscale.toml", "simulate"], "cfg");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert_eq!(output.status.code(), Some(2), "stderr: {stderr}");
    assert!(
        stderr.contains("/nonexistent/twoscale.toml"),
        "stderr does not name the file: {stderr}"
    );
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unknown_override_key_exits_with_config_code() {
    let (output, dir) = run(&["--set", "scenario.bogus=1", "simulate"], "key");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert_eq!(output.status.code(), Some(2), "stderr: {stderr}");
    assert!(
        stderr.contains("scenario.bogus"),
        "stderr does not name the key: {stderr}"
    );
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unstable_step_exits_with_divergence_code() {
    let (output, dir) = run(&["--set", "scenario.fast_step=0.05", "simulate"], "step");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert_eq!(output.status.code(), Some(3), "stderr: {stderr}");
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn simulate_reports_error_indexes_and_writes_files() {
    let (output, dir) = run(&["--set", "scenario.horizon=0.5", "simulate"], "sim");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(output.status.code(), Some(0), "stdout: {stdout}");
    for label in ["C_A", "C_B", "T", "T_j"] {
        assert!(
            stdout.contains(&format!("sigma_{label}:")),
            "missing sigma_{label} in: {stdout}"
        );
    }
    assert!(stdout.contains("rmse:"), "missing rmse in: {stdout}");
    assert!(dir.join("distributed.csv").is_file());
    assert!(dir.join("distributed_summary.txt").is_file());
    let _ = std::fs::remove_dir_all(dir);
}
