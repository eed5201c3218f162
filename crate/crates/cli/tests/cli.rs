use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(mode: &str, config: &Value, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, serde_json::to_string(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_chemotax"))
        .arg(mode)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/manifest.json")).unwrap()).unwrap()
}

fn small_run() -> Value {
    json!({
        "grid": {"cells": [32]},
        "scheme": {"k": 0.05, "t_final": 0.25},
        "initial": {
            "u": {"bump": {"center": [0.4], "width": 0.1, "amplitude": 1.0, "base": 0.1}},
            "v": {"constant": 0.5}
        }
    })
}

#[test]
fn simulate_zero_data_gives_constant_trajectory() {
    let d = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"cells": [16]},
        "scheme": {"k": 0.1, "t_final": 0.5},
        "initial": {"u": {"constant": 0.0}, "v": {"constant": 0.0}}
    });
    let out = run("simulate", &cfg, d.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fields = fs::read_to_string(d.path().join("out/fields.csv")).unwrap();
    for line in fields.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[4], 0.0);
        assert_eq!(cols[5], 0.0);
    }
    let m = manifest(d.path());
    assert_eq!(m["results"]["steps"], 5);
    assert_eq!(m["config"], cfg);
}

#[test]
fn every_output_is_listed_in_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = run("energy-report", &small_run(), d.path(), &["--gnuplot"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(d.path());
    let listed: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert!(listed.contains(&"energy.gp".to_string()));
    let mut on_disk: Vec<String> = fs::read_dir(d.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut sorted = listed.clone();
    sorted.sort();
    assert_eq!(on_disk, sorted);
    assert_eq!(m["results"]["budgets_pass"], true);
}

#[test]
fn outputs_are_bit_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["initial"]["v"] = json!({"perturbed": {"base": 0.5, "amplitude": 0.2}});
    cfg["seed"] = json!(42);
    for d in [&a, &b] {
        assert!(run("simulate", &cfg, d.path(), &["--jobs", "2"]).status.success());
    }
    for name in ["summary.csv", "fields.csv"] {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn convergence_writes_rate_table() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["convergence"] = json!({"study": "gaps", "k_list": [0.05, 0.025, 0.0125]});
    let out = run("convergence", &cfg, d.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.path().join("out/gaps_u.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(manifest(d.path())["results"]["slope_u"].is_number());
}

#[test]
fn validate_defaults_pass() {
    let d = tempfile::tempdir().unwrap();
    let out = run("validate", &json!({}), d.path(), &["--report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["all_pass"], true);
    let csv = fs::read_to_string(d.path().join("out/validate.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{csv}");
}

#[test]
fn optimize_recovers_reference_control() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["control"] = json!({
        "region": {"x": [0.0, 0.5]},
        "q": 2.0,
        "gamma_f": 1e-4,
        "lower": -3.0,
        "upper": 3.0,
        "targets": {"reference_control": 1.0}
    });
    let out = run("optimize", &cfg, d.path(), &["--report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(d.path());
    assert_eq!(m["results"]["converged"], true);
    for f in ["history.csv", "control.csv", "summary.csv"] {
        assert!(d.path().join("out").join(f).is_file());
    }
}

#[test]
fn config_errors_exit_2_with_json() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["scheme"]["k"] = json!(-0.1);
    cfg["model"] = json!({"alpha": 2.0});
    let out = run("simulate", &cfg, d.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    let msgs: Vec<&str> = err["messages"].as_array().unwrap().iter().map(|m| m.as_str().unwrap()).collect();
    assert!(msgs.iter().any(|m| m.starts_with("scheme.k")));
    assert!(msgs.iter().any(|m| m.starts_with("model")));
}

#[test]
fn optimize_without_targets_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["control"] = json!({"region": {"x": [0.0, 0.5]}});
    let out = run("optimize", &cfg, d.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("control.targets"));
}

#[test]
fn solver_failure_exits_3_and_keeps_partial_output() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg["scheme"]["picard_max"] = json!(1);
    cfg["scheme"]["picard_tol"] = json!(1e-14);
    let out = run("simulate", &cfg, d.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "solver");
    assert_eq!(manifest(d.path())["error"]["error"], "solver");
}

#[test]
fn csv_initial_data_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let g = chemotax::GridSpec::new_1d(32, 1.0).unwrap();
    let f = chemotax::Field::from_fn(g, |x| 1.0 + x[0]);
    let mut buf = Vec::new();
    chemotax::grid::write_field_csv(&f, &mut buf).unwrap();
    fs::write(d.path().join("u0.csv"), buf).unwrap();
    let mut cfg = small_run();
    cfg["initial"]["u"] = json!({"csv": "u0.csv"});
    let out = run("simulate", &cfg, d.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(d.path());
    assert!((m["results"]["initial_mass"].as_f64().unwrap() - f.integrate()).abs() < 1e-12);
}
