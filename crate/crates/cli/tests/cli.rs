//! Command-line surface: help, defaults dump and exit codes.

use std::path::Path;
use std::process::Command;

use emlo_core::config::RunConfig;

fn emlo(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_emlo")).args(args).output().expect("binary runs");
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn odometry_help_exits_zero() {
    let (ok, stdout) = emlo(&["odometry", "--help"]);
    assert!(ok);
    assert!(stdout.contains("--seq"));
}

#[test]
fn defaults_dump_parses_back() {
    let (ok, stdout) = emlo(&["inspect", "--defaults"]);
    assert!(ok);
    assert_eq!(RunConfig::from_json(&stdout).unwrap(), RunConfig::default());
}

#[test]
fn malformed_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"estimator": {"window": 1}}"#).unwrap();
    let code = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_emlo")).args(args).output().unwrap().status.code()
    };
    assert_eq!(code(&["simulate", "--config", p(&bad_cfg), "--out", p(tmp.path())]), Some(2));
    let scans = tmp.path().join("seq").join("velodyne");
    std::fs::create_dir_all(&scans).unwrap();
    std::fs::write(scans.join("000000.bin"), [0u8; 17]).unwrap();
    let seq = tmp.path().join("seq");
    assert_eq!(code(&["odometry", "--seq", p(&seq), "--out", p(tmp.path())]), Some(3));
}
