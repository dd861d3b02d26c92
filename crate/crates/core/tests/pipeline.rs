//! Cross-module checks: files written by one stage are read back by the next,
//! and a short noiseless sequence goes through the whole estimator.

use emlo_core::checkpoint::Checkpoint;
use emlo_core::config::{simulate_sequence, RunConfig, SequenceSpec};
use emlo_core::eval::{evaluate, relative_from_trajectory};
use emlo_core::features::{FrameGeometry, ModelParams};
use emlo_core::io::{read_covariances_csv, write_covariances_csv, write_kitti_poses, write_times, write_velodyne_bin, SequenceDir};
use emlo_core::learning::AdamState;
use emlo_core::odometry::run_odometry;
use emlo_core::trajectory::MotionPriorConfig;
use emlo_core::ErrorKind;

fn short_spec(frames: usize) -> SequenceSpec {
    SequenceSpec {
        name: "short".into(),
        radius: 24.0,
        height: 1.8,
        speed: 8.0,
        frames,
        motion_noise: MotionPriorConfig { qc_diag: [0.0; 6] },
        seed: 3,
    }
}

#[test]
fn sequence_directory_round_trip() {
    let cfg = RunConfig::default();
    let (gt, scans) = simulate_sequence(&cfg.world, &cfg.sensor, &short_spec(3), 10.0).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = SequenceDir::new(tmp.path());
    for (k, s) in scans.iter().enumerate() {
        write_velodyne_bin(&dir.scan_path(k), s).unwrap();
    }
    let stamps: Vec<f64> = gt.iter().map(|k| k.stamp).collect();
    write_times(&dir.times_path(), &stamps).unwrap();
    let world_from_sensor: Vec<_> = gt.iter().map(|k| k.pose.inverse()).collect();
    write_kitti_poses(&dir.poses_path(), &world_from_sensor).unwrap();

    let back = dir.load_scans().unwrap();
    assert_eq!(back.len(), scans.len());
    for (a, b) in back.iter().zip(&scans) {
        assert_eq!(a.stamp, b.stamp);
        assert_eq!(a.points.len(), b.points.len());
        // scans are stored as f32
        let worst = a.points.iter().zip(&b.points).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
    }
    for (a, b) in dir.ground_truth().unwrap().iter().zip(&gt) {
        assert!((a.matrix() - b.pose.matrix()).amax() < 1e-12);
    }
}

#[test]
fn truncated_scan_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = SequenceDir::new(tmp.path());
    std::fs::create_dir_all(dir.scan_dir()).unwrap();
    std::fs::write(dir.scan_path(0), [0u8; 20]).unwrap();
    assert_eq!(dir.load_scans().unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn checkpoint_and_config_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig { seed: 9, ..RunConfig::default() };
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    assert_eq!(RunConfig::load(&cfg_path).unwrap(), cfg);

    let params = ModelParams::random(cfg.seed);
    let ckpt = Checkpoint {
        config_hash: cfg.hash(),
        adam: AdamState::new(ModelParams::N_PARAMS),
        params,
    };
    let path = tmp.path().join("nested").join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn noiseless_sequence_through_the_estimator() {
    let mut cfg = RunConfig::default();
    cfg.sensor.range_noise = 0.0;
    let (gt, scans) = simulate_sequence(&cfg.world, &cfg.sensor, &short_spec(10), 10.0).unwrap();
    let geoms: Vec<FrameGeometry> = scans.iter().map(|s| FrameGeometry::new(s, &cfg.estimator.features).unwrap()).collect();
    let stamps: Vec<f64> = gt.iter().map(|k| k.stamp).collect();
    let run = run_odometry(&geoms, &stamps, &ModelParams::random(0), &cfg.estimator, None).unwrap();
    assert_eq!(run.result.len(), gt.len() - 1);
    assert_eq!(run.failed_windows, 0);
    for q in &run.result.covariances {
        assert!(q.cholesky().is_some());
    }

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cov.csv");
    write_covariances_csv(&path, &run.result.stamps, &run.result.covariances).unwrap();
    let (s, c) = read_covariances_csv(&path).unwrap();
    assert_eq!(s, run.result.stamps);
    assert_eq!(c, run.result.covariances);

    let poses: Vec<_> = gt.iter().map(|k| k.pose).collect();
    let summary = evaluate(&run.result, &poses).unwrap();
    // 7.2 m of path; a few centimetres of error at most
    assert!(summary.mean_translation_error_m < 0.05, "{summary:?}");
    assert_eq!(relative_from_trajectory(&poses).len(), run.result.len());
}
