use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn regsing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regsing")).args(args).output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

/// Runs with `--out` in a fresh directory; returns (exit code, csv, json).
fn run_out(cmd: &str, config: &str, extra: &[&str]) -> (i32, Option<String>, Option<Value>) {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run.csv");
    let mut args = vec![cmd, "--config", config, "--out", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    let o = regsing(&args);
    let csv = std::fs::read_to_string(&out).ok();
    let json = std::fs::read_to_string(out.with_extension("json")).ok().map(|t| serde_json::from_str(&t).unwrap());
    (o.status.code().unwrap(), csv, json)
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

#[test]
fn sphere_identity_map() {
    let (code, csv, json) = run_out("solve-harmonic", &config("sphere.json"), &[]);
    assert_eq!(code, 0);
    let csv = csv.unwrap();
    assert!(csv.starts_with("t,r,r_dot,residual\n"));
    let (t, r) = (column(&csv, "t"), column(&csv, "r"));
    assert_eq!(t.len(), 101);
    for (t, r) in t.iter().zip(&r) {
        assert!((t - r).abs() < 1e-8);
    }
    let json = json.unwrap();
    assert!(json["max_residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(json["trajectory"]["admissibility"]["pass"], true);
}

#[test]
fn warning_problem_is_rejected_with_report() {
    let (code, csv, json) = run_out("check", &config("warning.json"), &[]);
    assert_eq!(code, 2);
    assert!(csv.is_none());
    let report = &json.unwrap()["admissibility"];
    assert_eq!(report["offending_h"], serde_json::json!([1]));
    assert_eq!(report["pass"], false);
}

#[test]
fn warning_problem_emits_no_trajectory() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "w.json",
        r#"{"system": {"singular": ["y1"], "regular": ["-1"], "y0": [0.0]}, "t_end": 1.0}"#,
    );
    let (code, csv, json) = run_out("solve-singular", &cfg, &[]);
    assert_eq!(code, 2);
    assert!(csv.is_none());
    assert_eq!(json.unwrap()["admissibility"]["offending_h"], serde_json::json!([1]));
}

fn complex_entry(m: &Value, i: usize, j: usize) -> (f64, f64) {
    (m[i][j][0].as_f64().unwrap(), m[i][j][1].as_f64().unwrap())
}

#[test]
fn nilpotent_monodromy() {
    let o = regsing(&["monodromy", "--config", &config("nilpotent.json"), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    let json: Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = &json["monodromy"];
    let expected = [[(1.0, 0.0), (0.0, -2.0 * PI)], [(0.0, 0.0), (1.0, 0.0)]];
    for i in 0..2 {
        for j in 0..2 {
            let (re, im) = complex_entry(m, i, j);
            assert!((re - expected[i][j].0).abs() < 1e-8 && (im - expected[i][j].1).abs() < 1e-8, "{i}{j}: {re} {im}");
        }
    }
}

#[test]
fn flat_sweep_is_linear_and_golden() {
    let (code, csv, json) = run_out("solve-harmonic", &config("flat_sweep.json"), &[]);
    assert_eq!(code, 0);
    let csv = csv.unwrap();
    assert_eq!(column(&csv, "r_T"), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    assert_eq!(csv, golden("flat_sweep.csv"));
    for d in json.unwrap()["dr_dv"].as_array().unwrap() {
        assert!((d.as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_point_sweep_equals_plain_solve() {
    let dir = TempDir::new().unwrap();
    let sweep = write_config(
        &dir,
        "s.json",
        r#"{"metric": {"dim_p": 2, "diagonal": ["sin(t)^2", "sin(t)^2"]}, "t_end": 1.2, "sweep": {"v": "0.7:0.7:1"}}"#,
    );
    let plain = write_config(
        &dir,
        "p.json",
        r#"{"metric": {"dim_p": 2, "diagonal": ["sin(t)^2", "sin(t)^2"]}, "t_end": 1.2, "v": 0.7}"#,
    );
    let (_, sweep_csv, _) = run_out("solve-harmonic", &sweep, &[]);
    let (_, plain_csv, _) = run_out("solve-harmonic", &plain, &[]);
    let r_t = column(&sweep_csv.unwrap(), "r_T")[0];
    let r_last = *column(&plain_csv.unwrap(), "r").last().unwrap();
    assert_eq!(r_t, r_last);
}

#[test]
fn sphere_sweep_is_monotone() {
    let (code, csv, _) = run_out("solve-harmonic", &config("sphere_sweep.json"), &[]);
    assert_eq!(code, 0);
    let r = column(&csv.unwrap(), "r_T");
    assert_eq!(r.len(), 11);
    assert!(r.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn output_is_deterministic() {
    let a = run_out("solve-harmonic", &config("sphere_sweep.json"), &[]);
    let b = run_out("solve-harmonic", &config("sphere_sweep.json"), &[]);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn echoed_config_reproduces_run() {
    let (_, csv, json) = run_out("solve-harmonic", &config("block.json"), &["--tol", "1e-9"]);
    let json = json.unwrap();
    assert_eq!(json["config"]["tolerance"], 1e-9);
    let dir = TempDir::new().unwrap();
    let echoed = write_config(&dir, "echo.json", &json["config"].to_string());
    let (code, again, _) = run_out("solve-harmonic", &echoed, &[]);
    assert_eq!(code, 0);
    assert_eq!(csv, again);
}

#[test]
fn biharmonic_flat_family() {
    let (code, csv, json) = run_out("solve-biharmonic", &config("biharmonic_flat.json"), &[]);
    assert_eq!(code, 0);
    let csv = csv.unwrap();
    assert!(csv.starts_with("t,r,r_dot,F,F_dot,res_def,res_eq\n"));
    for ((t, r), f) in column(&csv, "t").iter().zip(column(&csv, "r")).zip(column(&csv, "F")) {
        assert!((r - (t + t.powi(3) / 10.0)).abs() < 1e-9);
        assert!((f - t).abs() < 1e-9);
    }
    let json = json.unwrap();
    assert!((json["r_dddot0"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn singular_solve_is_golden() {
    let o = regsing(&["solve-singular", "--config", &config("singular_linear.json"), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), golden("singular_linear.csv"));
}

#[test]
fn inhomogeneous_fundamental_solution() {
    let o = regsing(&["fundamental", "--config", &config("fundamental.json"), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    let json: Value = serde_json::from_slice(&o.stdout).unwrap();
    let y = json["y"][0][0].as_f64().unwrap();
    assert!((y - 1.0).abs() < 1e-8);
    let u = json["u"][0][0][0].as_f64().unwrap();
    assert!((u - 0.5).abs() < 1e-8);
}

#[test]
fn config_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let unknown = write_config(&dir, "u.json", r#"{"v": 1.0, "t_end": 1.0, "colour": "red"}"#);
    assert_eq!(run_out("solve-harmonic", &unknown, &[]).0, 3);
    let bad_expr = write_config(
        &dir,
        "e.json",
        r#"{"metric": {"dim_p": 1, "diagonal": ["sin(t"]}, "v": 1.0, "t_end": 1.0}"#,
    );
    assert_eq!(run_out("solve-harmonic", &bad_expr, &[]).0, 3);
    assert_eq!(run_out("solve-biharmonic", &config("sphere.json"), &[]).0, 3);
    let missing_v = write_config(&dir, "v.json", r#"{"metric": {"dim_p": 1, "diagonal": ["t^2"]}, "t_end": 1.0}"#);
    assert_eq!(run_out("solve-harmonic", &missing_v, &[]).0, 3);
    assert_eq!(regsing(&["solve-harmonic"]).status.code(), Some(3));
}

#[test]
fn pole_mismatch_exits_2_with_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "p.json",
        r#"{"metric": {"dim_p": 2, "diagonal": ["t^2", "t"]}, "v": 1.0, "t_end": 1.0}"#,
    );
    let (code, csv, json) = run_out("solve-harmonic", &cfg, &[]);
    assert_eq!(code, 2);
    assert!(csv.is_none());
    let err = json.unwrap()["error"].as_str().unwrap().to_string();
    assert!(err.contains("1.5"), "{err}");
}

#[test]
fn numerical_failure_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "n.json",
        r#"{"system": {"singular": ["-2*y1"], "regular": ["1/(1-t)^2"], "y0": [0.0]}, "t_end": 2.0}"#,
    );
    assert_eq!(run_out("solve-singular", &cfg, &[]).0, 4);
}

#[test]
fn io_errors_exit_5() {
    assert_eq!(regsing(&["check", "--config", "/nonexistent/config.json"]).status.code(), Some(5));
    let o = regsing(&["solve-harmonic", "--config", &config("sphere.json"), "--out", "/nonexistent/dir/x.csv"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn help_exits_0() {
    assert_eq!(regsing(&["--help"]).status.code(), Some(0));
}
