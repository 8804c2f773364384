//! Black-box tests of the `dsmreg` binary: exit codes, emitted files, and
//! the stable text surface other tooling may rely on.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dsmreg::bench::RUNS_CSV_HEADER;
use dsmreg::io::read_problem_json;

fn dsmreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).expect("write fixture");
    path.to_str().expect("utf-8 path").to_string()
}

#[test]
fn validate_schedule_certifies_the_log_family() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec = write(tmp.path(), "log.json", r#"{"kind":"log"}"#);
    let out = dsmreg(&["validate-schedule", &spec], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("log: certified"), "stdout: {stdout}");
}

#[test]
fn validate_schedule_rejects_too_fast_power_decay() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec = write(
        tmp.path(),
        "power.json",
        r#"{"kind":"power","p":0.9,"eps0":1.0}"#,
    );
    let out = dsmreg(&["validate-schedule", &spec], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}

#[test]
fn validate_schedule_rejects_unknown_fields() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec = write(
        tmp.path(),
        "bad.json",
        r#"{"kind":"power","p":0.5,"eps0":1.0,"extra":1}"#,
    );
    let out = dsmreg(&["validate-schedule", &spec], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn problem_emits_a_readable_archive() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let target = tmp.path().join("hilbert.json");
    let out = dsmreg(
        &["problem", "hilbert", "--n", "6", "--emit", target.to_str().unwrap()],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let file = fs::File::open(&target).expect("archive file");
    let archive = read_problem_json(file).expect("archive parses");
    assert_eq!(archive.label, "hilbert-6");
    assert_eq!(archive.n, 6);
    let problem = archive.to_instance().expect("archive rebuilds");
    assert_eq!(problem.operator.nrows(), 6);
}

#[test]
fn run_writes_the_three_csv_outputs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = write(
        tmp.path(),
        "config.json",
        r#"{
            "problems": [{"kind": "hilbert", "n": 8}],
            "schedules": [{"kind": "power", "p": 0.5, "eps0": 1.0}],
            "rules": [{"rule": "oracle"}],
            "deltas": [1e-2],
            "seeds": [7],
            "integrator_tol": 1e-8,
            "output_dir": "unused"
        }"#,
    );
    let out_dir = tmp.path().join("results");
    let out = dsmreg(
        &["run", &config, "--out", out_dir.to_str().unwrap(), "--jobs", "2"],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 runs: 1 ok"), "stdout: {stdout}");

    let runs = fs::read_to_string(out_dir.join("runs.csv")).expect("runs.csv");
    assert_eq!(runs.lines().next(), Some(RUNS_CSV_HEADER));
    assert_eq!(runs.lines().count(), 2);
    assert!(!runs.contains('\r'), "LF endings only");
    assert!(out_dir.join("rates.csv").is_file());
    assert!(out_dir.join("timings.csv").is_file());
}

#[test]
fn run_rejects_a_malformed_config() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = write(tmp.path(), "bad.json", r#"{"problems": []}"#);
    let out = dsmreg(&["run", &config], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}

#[test]
fn run_rejects_a_missing_config_file() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = dsmreg(&["run", "no-such-file.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}
