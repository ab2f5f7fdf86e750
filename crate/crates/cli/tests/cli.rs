use std::path::Path;
use std::process::{Command, Output};

fn mldili(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mldili"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"{{"hierarchy": {{"max_level": 1, "coarse_cells": 8, "base_dim": 10, "dim_scale": 10}},
            "run": {{"pilot_steps": 300, "write_traces": false}},
            "output_dir": "out"{extra}}}"#
    );
    let path = dir.join("cfg.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = mldili(dir.path(), &["--config", &cfg, "generate-data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = mldili(dir.path(), &["--config", &cfg, "build-lis"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("storage_ratio"));
    for eps in ["0.1", "0.05"] {
        let out = mldili(
            dir.path(),
            &["--config", &cfg, "--workers", "1", "run", "--mode", "mldili", "--eps", eps, "--seed", "3"],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = mldili(dir.path(), &["--config", &cfg, "report"]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(csv.lines().filter(|l| l.starts_with("MLDILI,")).count(), 2);
    assert!(dir.path().join("out/cost_vs_tolerance.csv").is_file());
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "data": {"snr": -1}, "proposal": {"dt": 0}"#);
    let out = mldili(dir.path(), &["--config", &cfg, "generate-data"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.snr") && err.contains("proposal.dt"), "{err}");
}

#[test]
fn unknown_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = mldili(dir.path(), &["--config", &cfg, "run", "--mode", "gibbs", "--eps", "0.1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_and_overwrites_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&mldili(dir.path(), &["--config", &cfg, "build-lis"])), 2);
    assert_eq!(code(&mldili(dir.path(), &["--config", &cfg, "generate-data"])), 0);
    assert_eq!(code(&mldili(dir.path(), &["--config", &cfg, "generate-data"])), 2);
    assert_eq!(code(&mldili(dir.path(), &["--config", &cfg, "generate-data", "--force"])), 0);
    assert_eq!(code(&mldili(dir.path(), &["--config", &cfg, "run", "--mode", "DILI", "--eps", "0.1"])), 2);
}

#[test]
fn unrepresentable_permeability_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "kernel": {"variance": 1e8}"#);
    let out = mldili(dir.path(), &["--config", &cfg, "generate-data"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
