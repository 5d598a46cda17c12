use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use steer_core::density::read_csv;

fn steer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steer"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = steer(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = vec![];
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p, ext));
        } else if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A reduced `brunovsky2d` for the slower modes.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
  "base": "brunovsky2d",
  "x_grid": {"bounds": [[-1.6, 1.6], [-1.6, 1.6]], "nodes": [25, 25]},
  "snapshots": [0.0, 0.5, 1.0],
  "hjb": {"times": 6}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn bridge_run_is_deterministic_and_conserves_mass() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let text = run_ok(&["--builtin", "brunovsky2d", "--output-dir", s(d)]);
        assert!(text.contains("τ⁻¹ failures 0"), "{text}");
    }
    let (fa, fb) = (files(&a, "csv"), files(&b, "csv"));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() >= 19, "convergence plus 18 snapshots");
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a), y.strip_prefix(&b));
        assert!(
            fs::read(x).unwrap() == fs::read(y).unwrap(),
            "{x:?} differs"
        );
    }
    let (mut ra, mut rb) = (json(&a.join("run.json")), json(&b.join("run.json")));
    assert!(ra["wall_time_s"].as_f64().unwrap() > 0.0);
    for r in [&mut ra, &mut rb] {
        r["wall_time_s"] = Value::Null;
        r["scenario"]["output_dir"] = Value::Null;
    }
    assert_eq!(ra, rb);

    let res = ra["residuals"].as_array().unwrap();
    assert!(res.iter().all(|r| r.as_f64().unwrap() <= 1e-9));
    for p in files(&a.join("snapshots"), "csv") {
        let name = p.file_name().unwrap().to_str().unwrap();
        if name.starts_with("v_") {
            continue;
        }
        let (grid, values) = read_csv(fs::File::open(&p).unwrap()).unwrap();
        let mass: f64 = values.iter().sum::<f64>() * grid.cell_volume();
        assert!((mass - 1.0).abs() <= 1e-3, "{name}: mass {mass}");
        let meta = json(&p.with_extension("json"));
        assert!((meta["mass"].as_f64().unwrap() - mass).abs() < 1e-12);
    }
}

#[test]
fn verify_mode_certifies_the_flat_system() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    run_ok(&[
        "--builtin",
        "example2",
        "--mode",
        "verify",
        "--output-dir",
        s(&dir),
    ]);
    let rep = json(&dir.join("verify.json"));
    assert_eq!(rep["system"], "flat3d");
    assert_eq!(rep["rank"], 3);
    assert_eq!(rep["pass"], true);
    assert!(rep["closed_loop_residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn transport_and_value_function_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let ot = tmp.path().join("ot");
    run_ok(&["--config", s(&cfg), "--mode", "ot", "--output-dir", s(&ot)]);
    let rec = json(&ot.join("ot/run.json"));
    let cost = rec["control_cost"].as_f64().unwrap();
    assert!(cost.is_finite() && cost > 0.0);
    for snap in rec["snapshots"].as_array().unwrap() {
        let m = snap["sigma_mass"].as_f64().unwrap();
        assert!((m - 1.0).abs() <= 1e-3, "{snap}");
    }
    assert_eq!(files(&ot.join("ot"), "csv").len(), 1 + 3 * 3);

    let hjb = tmp.path().join("hjb");
    run_ok(&[
        "--config",
        s(&cfg),
        "--mode",
        "hjb",
        "--output-dir",
        s(&hjb),
    ]);
    let rec = json(&hjb.join("hjb/run.json"));
    assert_eq!(rec["times"].as_array().unwrap().len(), 6);
    assert!(rec["residual_rms"].as_f64().unwrap().is_finite());
    assert_eq!(files(&hjb.join("hjb"), "csv").len(), 6);
}

#[test]
fn configuration_errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"base": "brunovsky2d", "epsilon": -1.0}"#).unwrap();
    let unknown = tmp.path().join("unknown.json");
    fs::write(&unknown, r#"{"base": "brunovsky2d", "epsilonn": 0.1}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["--config", s(&bad)],
        vec!["--config", s(&unknown)],
        vec!["--config", "/nonexistent/scenario.json"],
        vec!["--builtin", "example1", "--config", s(&bad)],
        vec!["--builtin", "example1", "--snapshots", "0,0.5"],
        vec!["--builtin", "nope"],
    ];
    for args in cases {
        let out = steer(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn failed_runs_leave_previous_artifacts_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    run_ok(&[
        "--builtin",
        "brunovsky2d",
        "--mode",
        "verify",
        "--output-dir",
        s(&dir),
    ]);
    let before = fs::read(dir.join("verify.json")).unwrap();
    let out = steer(&[
        "--builtin",
        "brunovsky2d",
        "--max-iter",
        "1",
        "--output-dir",
        s(&dir),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(fs::read(dir.join("verify.json")).unwrap(), before);
    let names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["out"], "staging directory left behind");
}
