use std::path::Path;
use std::process::{Command, Output};

fn fmclass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmclass")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn synth(dir: &Path, kind: &str) -> String {
    let out = dir.join(kind);
    let o = fmclass(&["synth", "--kind", kind, "--classes", "2", "--images", "10", "--size", "32", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().trim().to_string()
}

#[test]
fn pixel_rf_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "pixel");
    let out = tmp.path().join("run");
    let o = fmclass(&[
        "pixel-rf", "--manifest", &manifest, "--model", "synth", "--budgets", "50,all", "--folds", "2", "--repeats", "1",
        "--trees", "10", "--rf-side", "16", "--no-timings", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("method,model,budget"));
    assert_eq!(stdout.lines().count(), 3);
    assert!(out.join("results.csv").is_file());
    assert!(out.join("summary.csv").is_file());

    let pred = out.join("predictions").join("pixel-rf_synth_b50_f0_r0");
    let o = fmclass(&["eval", "--manifest", &manifest, "--predictions", pred.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8(o.stdout).unwrap();
    let f1: f64 = line.trim().split('\t').last().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let summary = tmp.path().join("again.csv");
    let o = fmclass(&["report", out.join("results.csv").to_str().unwrap(), "--out", summary.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&summary).unwrap(), std::fs::read(out.join("summary.csv")).unwrap());
}

#[test]
fn object_rf_with_aggregators() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "object");
    let out = tmp.path().join("run");
    let o = fmclass(&[
        "object-rf", "--manifest", &manifest, "--model", "synth", "--budgets", "10", "--folds", "2", "--repeats", "2",
        "--trees", "10", "--aggregators", "mean,std,area", "--predictions", "none", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(!out.join("predictions").exists());
}

#[test]
fn validation_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), "pixel");
    let out = tmp.path().join("run");
    for budgets in ["100,10", "0", "ten"] {
        let o = fmclass(&["pixel-rf", "--manifest", &manifest, "--model", "synth", "--budgets", budgets, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "budgets {budgets}");
    }
    let o = fmclass(&["object-rf", "--manifest", &manifest, "--model", "synth", "--aggregators", "median", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = fmclass(&["pixel-rf", "--manifest", &manifest, "--model", "missing", "--budgets", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fmclass(&["pixel-rf", "--manifest", tmp.path().join("nope.json").to_str().unwrap(), "--model", "synth", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
