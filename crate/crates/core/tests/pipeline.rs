use std::fs;

use tacmap::geometry::PoseSE3;
use tacmap::io;
use tacmap::pipeline::*;

fn small(dir: &std::path::Path, frames: usize) -> PipelineConfig {
    load_config(
        "{}",
        &[
            format!("output_dir=\"{}\"", dir.display()),
            format!("scenario.trajectory.frames={frames}"),
            "scenario.trajectory.radius=3".into(),
        ],
    )
    .unwrap()
}

#[test]
fn single_frame_map_is_the_corrected_local_map() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 1);
    cfg.registration.voxel_size = 0.1;
    let front = run_front(&cfg).unwrap();
    let m = run_back(&cfg, &front, true, dir.path()).unwrap();
    let traj = io::read_trajectory(&dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.len(), 1);
    let (dt, dr) = traj[0].distance_to(&PoseSE3::identity());
    assert!(dt < 1e-12 && dr < 1e-12);
    // the fused map is the local map up to voxel merging
    let local = &front.maps[0];
    let fused = io::read_ply(&dir.path().join("global_map.ply")).unwrap();
    assert_eq!(m.accounting.frame_points, local.len());
    assert_eq!(fused.len(), m.accounting.fused_points);
    let tree = tacmap::spatial::KdTree::new(local.points());
    // centroids stay inside their 0.05 mm voxel
    let far = fused.points().iter().filter(|p| tree.nearest(p).unwrap().1.sqrt() > 0.05 * 3f64.sqrt()).count();
    assert_eq!(far, 0);
}

#[test]
fn identical_config_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_reconstruction(&small(a.path(), 6)).unwrap();
    run_reconstruction(&small(b.path(), 6)).unwrap();
    for f in ["trajectory.csv", "metrics.json", "global_map.ply", "loops.jsonl", "graph.g2o"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cached_local_maps_reproduce_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 6);
    cfg.cache = true;
    let first = run_reconstruction(&cfg).unwrap();
    assert!(!first.cache_hit);
    let traj = fs::read(dir.path().join("trajectory.csv")).unwrap();
    let metrics = fs::read(dir.path().join("metrics.json")).unwrap();
    let second = run_reconstruction(&cfg).unwrap();
    assert!(second.cache_hit);
    assert_eq!(fs::read(dir.path().join("trajectory.csv")).unwrap(), traj);
    assert_eq!(fs::read(dir.path().join("metrics.json")).unwrap(), metrics);

    // a back-end-only change reuses the cache, a front-end change does not
    cfg.graph.optimizer.max_iterations = 5;
    assert!(run_reconstruction(&cfg).unwrap().cache_hit);
    cfg.scenario.force_range = [1.1, 1.7];
    assert!(!run_reconstruction(&cfg).unwrap().cache_hit);
}

#[test]
fn manifest_lists_existing_files_and_balances_points() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_reconstruction(&small(dir.path(), 6)).unwrap();
    assert!(!m.files.is_empty());
    for p in m.files.values() {
        assert!(p.exists(), "{}", p.display());
    }
    assert_eq!(m.accounting.fused_points + m.accounting.merged, m.accounting.frame_points);
    let on_disk: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(m.config_hash, small(dir.path(), 6).hash());
}

#[test]
fn optimization_lowers_rpe_on_a_noisy_loop() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 10);
    cfg.scenario.odometry_noise = OdometryNoise { translation_mm: 0.3, rotation_deg: 0.2 };
    let m = run_reconstruction(&cfg).unwrap();
    assert!(m.metrics.loops_accepted >= 1);
    assert!(m.metrics.rpe < m.metrics.rpe_odometry, "{} vs {}", m.metrics.rpe, m.metrics.rpe_odometry);
}

#[test]
fn ablation_rows_differ_only_in_the_toggles() {
    let dir = tempfile::tempdir().unwrap();
    let rows = run_ablation(&small(dir.path(), 6)).unwrap();
    let flags: Vec<(bool, bool)> = rows.iter().map(|r| (r.correction, r.optimization)).collect();
    assert_eq!(flags, [(false, false), (false, true), (true, false), (true, true)]);
    assert!(rows.iter().all(|r| r.config_hash == rows[0].config_hash));
    assert!(dir.path().join("ablation.json").exists());
    let table = fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    for r in &rows {
        assert!(dir.path().join(format!("correction_{}_optimization_{}", on(r.correction), on(r.optimization))).join("metrics.json").exists());
    }
}

fn on(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[test]
fn evaluate_files_matches_the_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 6);
    let m = run_reconstruction(&cfg).unwrap();
    let p = |f: &str| dir.path().join(f);
    let r = evaluate_files(&p("global_map.ply"), &p("trajectory.csv"), Some(&p("trajectory_truth.csv")), None, &cfg.metrics, cfg.seed).unwrap();
    assert!((r.rpe.unwrap() - m.metrics.rpe).abs() < 1e-9);
    assert_eq!(r.points, m.accounting.fused_points);
}
