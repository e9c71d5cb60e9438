//! End-to-end checks of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strategic-cp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn evaluate_restores_a_saved_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--n",
        "300",
        "--bootstrap-b",
        "100",
        "--candidates",
        "40",
        "--seed",
        "3",
    ];
    let cal = dir.path().join("cal");
    let args: Vec<&str> = ["calibrate"].into_iter().chain(small).collect();
    assert!(run(&args, &cal).status.success());

    let fresh = dir.path().join("fresh");
    let args: Vec<&str> = ["evaluate"].into_iter().chain(small).collect();
    assert!(run(&args, &fresh).status.success());

    let restored = dir.path().join("restored");
    let saved = cal.join("calibration.json");
    let out = run(
        &["evaluate", "--predictor", saved.to_str().unwrap()],
        &restored,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = std::fs::read_to_string(fresh.join("evaluate.csv")).unwrap();
    let b = std::fs::read_to_string(restored.join("evaluate.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("method,strategic_coverage,coverage_lo,coverage_hi,"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "a,b\n1,2\n3,oops\n").unwrap();
    let out = run(
        &[
            "calibrate",
            "--data",
            csv.to_str().unwrap(),
            "--label-col",
            "y",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('y'));

    let out = run(
        &[
            "calibrate",
            "--data",
            csv.to_str().unwrap(),
            "--label-col",
            "a",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains('3') && msg.contains('b'), "{msg}");

    let out = run(&["sweep-alpha", "--alpha", "0"], dir.path());
    assert!(!out.status.success());
}
