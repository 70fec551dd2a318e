use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "profile": {"family": "sis_indicator", "lambda_base": 2.0, "duration": {"law": "exponential", "rate": 1.0}},
    "initial": {"p_infected": 0.1},
    "horizon": 2.0,
    "seed": 11,
    "assignment": "bernoulli",
    "population_sizes": [200],
    "replicates": 20,
    "fclt": {"agents": 200, "paths": 30, "dt": 0.1, "probes": [1.0, 2.0]}
}"#;

fn epiwane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiwane"))
        .args(args)
        .env("EPIWANE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flln_reaches_endemic_level() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let out = epiwane(&["flln", "--config", s(&config), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("flln.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# epiwane fingerprint="));
    assert_eq!(lines.next().unwrap(), "t,sbar,fbar,ubar,ibar");
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 20.0);
    assert!((0.49..=0.51).contains(&last[4]), "Ī(20) = {}", last[4]);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", SMALL);
    let read = |sub: &str, seed: &str| {
        let out_dir = dir.path().join(sub);
        let out = epiwane(&["simulate", "--config", s(&config), "--out", s(&out_dir), "--seed", seed, "--threads", "1"]);
        assert!(out.status.success());
        (
            fs::read(out_dir.join("trajectory.csv")).unwrap(),
            fs::read(out_dir.join("events.csv")).unwrap(),
        )
    };
    let a = read("a", "3");
    let b = read("b", "3");
    let c = read("c", "4");
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
    let header = String::from_utf8(a.0.clone()).unwrap();
    assert!(header.lines().nth(1) == Some("t,fbar,sbar,I,U"));
    assert!(header.lines().next().unwrap().ends_with("seed=3"));
}

#[test]
fn invalid_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", &SMALL.replace("\"lambda_base\": 2.0", "\"lambda_base\": -1.0"));
    let out = epiwane(&["flln", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("profile.lambda_base"));
    let unknown = write_config(dir.path(), "unknown.json", &SMALL.replace("\"seed\"", "\"sede\": 1, \"seed\""));
    let out = epiwane(&["flln", "--config", s(&unknown)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn compare_checks_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", SMALL);
    let out_dir = dir.path().join("out");
    for cmd in ["fclt", "ensemble"] {
        let out = epiwane(&[cmd, "--config", s(&config), "--out", s(&out_dir)]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = epiwane(&["compare", "--config", s(&config), "--out", s(&out_dir)]);
    assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("compare_report.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("compare_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 11);

    let reseeded = epiwane(&["compare", "--config", s(&config), "--out", s(&out_dir), "--seed", "12"]);
    assert_eq!(reseeded.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&reseeded.stderr).contains("does not match"));

    let edited = write_config(dir.path(), "edited.json", &SMALL.replace("\"horizon\": 2.0", "\"horizon\": 2.0, \"tol\": 1e-9"));
    let out = epiwane(&["compare", "--config", s(&edited), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}
