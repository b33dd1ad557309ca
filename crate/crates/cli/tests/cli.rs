use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bifbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifbm")).args(args).env_remove("BIFBM_THREADS").output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn strip_runtime(text: &str) -> Value {
    let mut v: Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("runtime_seconds");
    v
}

#[test]
fn list_and_describe() {
    let out = bifbm(&["list"]);
    assert!(out.status.success());
    let kinds: Vec<String> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(kinds.len(), 6);

    let out = bifbm(&["describe", "qv"]);
    assert!(out.status.success());
    let d: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(d["defaults"]["params"]["h"][0], 0.8);
    assert!(d["optional"].as_array().unwrap().iter().any(|f| f == "grid.n"));

    let out = bifbm(&["describe", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"kind": "ito", "params": {"h": [0.2], "k": [0.5]}, "grid": {"n": 0}}"#,
    );
    let out = bifbm(&["ito", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2HK >= 1"), "{err}");
    assert!(err.contains("grid.n"), "{err}");

    let cfg = write_config(dir.path(), "qv.json", r#"{"kind": "qv"}"#);
    assert_eq!(bifbm(&["ito", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(bifbm(&["qv", "--config", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn ito_run_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ito.json",
        r#"{"kind": "ito", "grid": {"n": 64}, "mc": {"n_paths": 200, "seed": 3},
            "estimator": {"test_functions": ["square", "cosine"], "resolutions": [16, 64]}}"#,
    );
    let first = dir.path().join("a");
    let out = bifbm(&["ito", "--config", &cfg, "--out", first.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(first.join("report.json")).unwrap();
    let doc: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(doc["metrics"][0]["estimate"], 0.0);
    assert_eq!(doc["seed"], 3);

    let second = dir.path().join("b");
    let report_path = first.join("report.json");
    let out = bifbm(&["replay", report_path.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let replayed = fs::read_to_string(second.join("report.json")).unwrap();
    assert_eq!(strip_runtime(&report), strip_runtime(&replayed));

    let out = bifbm(&["validate", report_path.to_str().unwrap()]);
    assert!(out.status.success());
}

#[test]
fn seed_flag_and_thread_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.json",
        r#"{"kind": "simulate", "grid": {"n": 8}, "mc": {"n_paths": 500}}"#,
    );
    let run = |seed: &str, threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_bifbm"))
            .args(["simulate", "--config", &cfg, "--seed", seed])
            .env("BIFBM_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.code().is_some_and(|c| c <= 1));
        strip_runtime(&String::from_utf8(out.stdout).unwrap())
    };
    let a = run("5", "1");
    let b = run("5", "3");
    assert_eq!(a, b);
    assert_eq!(a["config"]["mc"]["seed"], 5);
    assert_ne!(a["metrics"], run("6", "1")["metrics"]);
}

#[test]
fn csv_uses_round_trip_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "chaos.json",
        r#"{"kind": "chaos", "estimator": {"truncation": 20}, "output": {"csv": true}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = bifbm(&["chaos", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = if report["all_pass"].as_bool().unwrap() { 0 } else { 1 };
    assert_eq!(out.status.code(), Some(expected));
    let csv = fs::read_to_string(out_dir.join("chaos_norms.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("order,norm,partial_sum"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let norm: f64 = row[1].parse().unwrap();
    assert_eq!(format!("{norm:?}"), row[1]);
    assert!(norm > 0.0);
}
