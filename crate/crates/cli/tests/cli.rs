//! End-to-end checks of the binary: pipeline runs, staged commands agree
//! with the one-shot pipeline, and failures use the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use riskgrid_core::nav::{Cell, GridMap, NavConfig, NavInstance, NavParams};

const MICRO_CFG: &str = r#"{
    "width": 5, "height": 4,
    "obstacles": 2, "waypoints": 2, "transmission": 1,
    "iterations": 2, "episodes_per_iteration": 6, "max_steps": 200,
    "test_states": 8, "eval_episodes": 12, "fresh_configs": 2,
    "train_configs": 2
}"#;

fn riskgrid() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskgrid"));
    cmd.env("RISKGRID_THREADS", "2");
    cmd
}

fn write_micro_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, MICRO_CFG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn compare_then_report_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = dir.path().join("out");
    let out_arg = out.to_str().unwrap();

    let status = riskgrid()
        .args(["compare", "--config", &cfg, "--seed", "9", "--out", out_arg])
        .status()
        .unwrap();
    assert!(status.success());
    for name in [
        "train_instances.json",
        "theta.json",
        "theta_history.csv",
        "gammas.json",
        "stats.csv",
        "trajectories.csv",
        "summary.json",
        "report.txt",
    ] {
        assert!(out.join(name).exists(), "{name} missing after compare");
    }

    let report = riskgrid().args(["report", "--out", out_arg]).output().unwrap();
    assert!(report.status.success());
    let stdout = String::from_utf8(report.stdout).unwrap();
    assert!(stdout.contains("verified"), "unexpected report output: {stdout}");
    assert!(stdout.contains("averse"));
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let one_shot = dir.path().join("one_shot");
    let staged = dir.path().join("staged");

    let status = riskgrid()
        .args(["compare", "--config", &cfg, "--seed", "4", "--out", one_shot.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());

    for step in ["train", "improve", "evaluate"] {
        let status = riskgrid()
            .args([step, "--config", &cfg, "--seed", "4", "--out", staged.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success(), "{step} failed");
    }

    for name in ["stats.csv", "trajectories.csv", "gammas.json"] {
        let a = fs::read(one_shot.join(name)).unwrap();
        let b = fs::read(staged.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between staged and one-shot runs");
    }
}

#[test]
fn exact_solves_a_corridor_task() {
    let dir = tempfile::tempdir().unwrap();
    let map = GridMap::new(4, 1, &[]).unwrap();
    let config = NavConfig::new(map, vec![Cell::new(0, 0)], vec![Cell::new(3, 0)]).unwrap();
    let instance = NavInstance::new(config, NavParams::default()).unwrap();
    let path = dir.path().join("corridor.json");
    fs::write(&path, instance.to_json_string()).unwrap();

    let out = riskgrid()
        .args(["exact", "--config", path.to_str().unwrap()])
        .arg("--out")
        .arg(dir.path().join("exact_out"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("optimal="), "unexpected output: {stdout}");
    assert!(dir.path().join("exact_out").join("exact.json").exists());
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"iterations": 0}"#).unwrap();
    let status = riskgrid()
        .args([
            "compare",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn improve_without_training_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let status = riskgrid()
        .args([
            "improve",
            "--config",
            &cfg,
            "--out",
            dir.path().join("empty").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn zero_thread_env_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = riskgrid()
        .env("RISKGRID_THREADS", "0")
        .args([
            "compare",
            "--config",
            &cfg,
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("RISKGRID_THREADS"), "unexpected stderr: {stderr}");
}
