use std::path::Path;
use std::process::{Command, Output};

fn tacmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacmap")).args(args).output().expect("binary runs")
}

fn small(dir: &Path) -> Vec<String> {
    [
        format!("output_dir={}", dir.display()),
        "scenario.trajectory.frames=6".into(),
        "scenario.trajectory.radius=3".into(),
    ]
    .into_iter()
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

fn run(verb: &[&str], dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = verb.iter().map(|s| s.to_string()).collect();
    args.extend(small(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    tacmap(&refs)
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["reconstruct"], dir.path(), &["--set", "registration.voxel_size=0"]).status.code(), Some(2));
    assert_eq!(run(&["reconstruct"], dir.path(), &["--set", "nonsense.key=1"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(tacmap(&["reconstruct", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(tacmap(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ply");
    let out = tacmap(&["evaluate", "--map", missing.to_str().unwrap(), "--trajectory", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluate"));
    let sparse = run(&["reconstruct"], dir.path(), &["--set", "scenario.trajectory.radius=30"]);
    assert_eq!(sparse.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&sparse.stderr).contains("simulate"));
}

#[test]
fn reconstruct_then_evaluate_with_assert() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["reconstruct"], dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["frames"], 6);
    for f in ["global_map.ply", "trajectory.csv", "trajectory_odometry.csv", "loops.jsonl", "metrics.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let eval = |extra: &[&str]| {
        let mut a = vec!["evaluate".to_string(), "--map".into(), p("global_map.ply"), "--trajectory".into(), p("trajectory.csv")];
        a.extend(["--truth".into(), p("trajectory_truth.csv"), "--assert".into()]);
        a.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        tacmap(&refs)
    };
    assert_eq!(eval(&["--max-rpe", "1.0", "--max-flatness", "1.0"]).status.code(), Some(0));
    let strict = eval(&["--max-rpe", "1e-12"]);
    assert_eq!(strict.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("rpe"));
    // deviation thresholds need a reference cloud
    assert_eq!(eval(&["--max-e-mean", "1.0"]).status.code(), Some(2));
}

#[test]
fn simulate_and_calibrate_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate"], dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("frames/frame_0005.ply").exists());
    assert!(dir.path().join("object.png").exists() && dir.path().join("object.json").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("trajectory_truth.csv")).unwrap().lines().count(), 6);

    let stem = dir.path().join("std/standard");
    let out = run(&["calibrate", "standard", "--out", stem.to_str().unwrap()], dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let standard = stem.to_str().unwrap().to_string();
    let with_std = run(&["reconstruct"], dir.path(), &["--set", &format!("correction.standard=\"{standard}\"")]);
    assert!(with_std.status.success(), "{}", String::from_utf8_lossy(&with_std.stderr));
    let direct = run(&["reconstruct"], dir.path(), &[]);
    // the saved standard frame reproduces the simulated one
    assert_eq!(with_std.stdout, direct.stdout);
}

#[test]
fn dataset_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let quick = [
        "model.train_presses=3",
        "model.eval_presses=2",
        "model.dataset.total_vectors=4000",
        "model.train.hidden_layers=[8]",
        "model.train.epochs=2",
        "model.train.batch_size=500",
        "model.train.min_samples=100",
    ];
    let extra: Vec<&str> = quick.iter().flat_map(|s| ["--set", *s]).collect();
    let out = run(&["dataset", "build"], dir.path(), &extra);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["model", "train"], dir.path(), &extra);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["epochs"], 2);
    let out = run(&["model", "eval"], dir.path(), &extra);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(fit["slope_pitch"].as_f64().unwrap().is_finite());
}
