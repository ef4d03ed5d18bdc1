//! End-to-end runs of the `hspde` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FORWARD_CURVE: &str = include_str!("../../../configs/forward_curve.conf");
const EXACT_OU: &str = include_str!("../../../configs/exact_ou.conf");

fn hspde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hspde")).args(args).output().expect("binary runs")
}

fn run_config(dir: &Path, sub: &str, text: &str) -> Output {
    let config = dir.join("run.conf");
    fs::write(&config, text).unwrap();
    let out = dir.join("out");
    hspde(&[sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"])
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn forward_curve_writes_boundary_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "simulate", FORWARD_CURVE);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let boundary = read(tmp.path(), "boundary.csv");
    let lines: Vec<&str> = boundary.lines().collect();
    assert_eq!(lines[0], "t,value");
    assert_eq!(lines.len(), 102);
    assert!(lines[1].starts_with("0.0"));

    let field = read(tmp.path(), "field.csv");
    let rows: Vec<&str> = field.lines().collect();
    assert_eq!(rows.len(), 102);
    assert!(rows.iter().all(|r| r.split(',').count() == 202));

    // the boundary column of the field is the boundary series
    for (b, f) in lines[1..].iter().zip(&rows[1..]) {
        assert_eq!(b.split(',').nth(1), f.split(',').nth(1));
    }
}

#[test]
fn manifest_records_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "simulate", EXACT_OU);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read(tmp.path(), "manifest.txt");
    for key in ["version:", "command: simulate", "config_sha256:", "seed:", "paths:", "rng:", "grid.dt:", "boundary_mode:", "files:"] {
        assert!(manifest.contains(key), "manifest lacks {key}\n{manifest}");
    }
    assert!(read(tmp.path(), "moments.txt").contains("second_moment"));
    assert!(read(tmp.path(), "budget.csv").lines().count() > 1);
}

#[test]
fn zero_kernels_hold_the_level() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "simulate", include_str!("../../../configs/zero.conf"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let boundary = read(tmp.path(), "boundary.csv");
    for line in boundary.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 1.5);
    }
}

#[test]
fn ensemble_summary_with_several_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{EXACT_OU}\nrun.paths = 8\n");
    let out = run_config(tmp.path(), "simulate", &text);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ensemble = read(tmp.path(), "ensemble.csv");
    assert!(ensemble.starts_with("t,mean,second_moment,mean_std_error"));
}

#[test]
fn config_errors_exit_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "simulate", "model.kernel.g = exponential\nmodel.kernel.g.alpha\n");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = run_config(tmp.path(), "simulate", "model.kernel.g = zero\ngrid.dt = 0.1\ngrid.steps = 3\nrun.paths = 0\n");
    assert_eq!(out.status.code(), Some(2));

    let out = run_config(tmp.path(), "simulate", "model.kernel.g = zero\ngrid.dt = 0.1\ngrid.steps = 3\nmodel.colour = red\n");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cfl_violation_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "simulate", "model.kernel.g = zero\ngrid.dt = 0.1\ngrid.dx = 0.05\ngrid.steps = 3\n");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fbm_reports_regularization_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = hspde(&["fbm", "--hurst", "0.75", "--epsilon", "0.01", "--steps", "100", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read(tmp.path(), "manifest.txt");
    let bound: f64 = manifest
        .lines()
        .find_map(|l| l.strip_prefix("regularization_bound: "))
        .expect("bound line")
        .parse()
        .unwrap();
    assert!((bound - (2.0 + 1.0 / 0.75) * 0.01f64.powf(1.5)).abs() < 1e-12);
    assert_eq!(read(tmp.path(), "boundary.csv").lines().count(), 102);

    let out = hspde(&["fbm", "--hurst", "1.2", "--epsilon", "0.01", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_passes_on_exact_ou() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), "validate", EXACT_OU);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.lines().any(|l| l.starts_with("PASS")));
    assert!(!stdout.lines().any(|l| l.starts_with("FAIL")));
}
