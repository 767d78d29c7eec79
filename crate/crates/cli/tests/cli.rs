use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spine-mpc"))
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn metrics(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(dir.join("metrics.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn reference_defaults_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = run(&["--controller", "reference", "--steps", "20", "--out", out]);
    assert_eq!(code, 0, "{err}");
    let m = metrics(dir.path());
    assert_eq!(m["N"], "4");
    assert_eq!(m["u_min"], "0");
    assert_eq!(m["u_max"], "0.3");
    assert_eq!(m["h"], "0.15");
    assert_eq!((m["Q"].as_str(), m["P"].as_str(), m["R"].as_str()), ("[1]", "[1]", "[2]"));
    assert_eq!(m["steps"], "20");
    assert_eq!(m["constraint_violations"], "0");
}

#[test]
fn zero_steps_give_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run(&["--steps", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for name in ["log.csv", "xz_paths.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 1, "{name} should hold only its header");
    }
    let traj = std::fs::read_to_string(dir.path().join("trajectory_ref.csv")).unwrap();
    assert!(traj.lines().count() > 1);
    assert_eq!(metrics(dir.path())["steps"], "0");
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let (code, err) =
            run(&["--steps", "300", "--disturbance", "on", "--seed", "42", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(sha(&dirs[0].path().join("log.csv")), sha(&dirs[1].path().join("log.csv")));

    let other = tempfile::tempdir().unwrap();
    run(&["--steps", "300", "--disturbance", "on", "--seed", "43", "--out", other.path().to_str().unwrap()]);
    assert_ne!(sha(&dirs[0].path().join("log.csv")), sha(&other.path().join("log.csv")));
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["reference.toml", "smoothing.toml"] {
        let path = configs_dir().join(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let original: toml::Value = toml::from_str(&text).unwrap();
        let printed = bin().args(["--config", path.to_str().unwrap(), "--print-config"]).output().unwrap();
        assert!(printed.status.success());
        let reparsed: toml::Value = toml::from_str(std::str::from_utf8(&printed.stdout).unwrap()).unwrap();
        assert_eq!(original, reparsed, "{name}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let path = configs_dir().join("reference.toml");
    let printed = bin()
        .args(["--config", path.to_str().unwrap(), "--seed", "9", "--disturbance", "on", "--steps", "5", "--print-config"])
        .output()
        .unwrap();
    let v: toml::Value = toml::from_str(std::str::from_utf8(&printed.stdout).unwrap()).unwrap();
    assert_eq!(v["disturbance"]["seed"].as_integer(), Some(9));
    assert_eq!(v["disturbance"]["enabled"].as_bool(), Some(true));
    assert_eq!(v["run"]["steps"].as_integer(), Some(5));
}

#[test]
fn unknown_key_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[run]\nstepz = 3\n").unwrap();
    let (code, err) = run(&["--config", path.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("stepz") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_config_exits_with_one() {
    let (code, err) = run(&["--config", "/nonexistent/spine.toml"]);
    assert_eq!(code, 1);
    assert!(err.contains("nonexistent"), "{err}");
}

#[test]
fn colliding_sweep_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steep.toml");
    std::fs::write(&path, "[trajectory]\nsweep = 3.0\n").unwrap();
    let (code, _) = run(&["--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn solver_abort_exits_with_two_and_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("starved.toml");
    std::fs::write(&path, "[run]\nmax_iter = 1\nmax_consecutive_failures = 2\nsteps = 50\n").unwrap();
    let out = dir.path().join("out");
    let (code, err) = run(&["--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert_ne!(metrics(&out)["aborted"], "no");
}

#[test]
fn sweep_mode_writes_one_directory_per_angle() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run(&["--steps", "10", "--sweep", "0.1,0.2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for angle in ["0.1", "0.2"] {
        let m = metrics(&dir.path().join(format!("sweep_{angle}")));
        assert_eq!(m["sweep"], angle);
    }
}
