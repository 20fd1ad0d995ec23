use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env_remove("GANG_SCHED")
        .env_remove("SCHED_SEED")
        .output()
        .expect("failed to launch bench")
}

const SMALL: &[&str] = &[
    "run",
    "--workers",
    "2",
    "--block-cols",
    "3",
    "--tiles",
    "2",
    "--panel-team",
    "2",
    "--panel-steps",
    "2",
    "--compute-us",
    "50",
    "--comm-latency-us",
    "100",
    "--repeats",
    "2",
    "--compute",
    "yield",
];

/// `SMALL` with the flags in `extra` added or overridden.
fn with(extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    let mut i = 0;
    while i < extra.len() {
        let flag = extra[i];
        let value = extra.get(i + 1).filter(|v| !v.starts_with("--"));
        match (args.iter().position(|a| a == flag), value) {
            (Some(at), Some(v)) => args[at + 1] = v.to_string(),
            (None, Some(v)) => args.extend([flag.to_string(), v.to_string()]),
            (_, None) => args.push(flag.to_string()),
        }
        i += if value.is_some() { 2 } else { 1 };
    }
    args
}

fn run(extra: &[&str]) -> Output {
    let args = with(extra);
    bench(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn run_prints_a_summary_and_exits_zero() {
    let out = run(&["--kernel", "chol", "--policy", "history"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("kernel=chol"));
    assert!(text.contains("policy=history"));
    assert!(text.contains("runs=2"));
    assert!(text.contains("deadlock_detected=false"));
}

#[test]
fn json_output_parses() {
    let out = run(&["--json", "--kernel", "qr"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["deadlock_detected"], false);
}

#[test]
fn trace_and_summary_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("events.jsonl");
    let summary = dir.path().join("workers.csv");
    let out = run(&[
        "--trace",
        trace.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let back = gangsteal::trace::read_events(&trace).unwrap();
    assert!(!back.events.is_empty());
    assert_eq!(back.n_workers, 2);
    let csv = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("schema_version,worker,"));
}

#[test]
fn naive_deadlock_exits_nonzero_with_a_flagged_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("events.jsonl");
    let out = bench(&[
        "run",
        "--kernel",
        "qr",
        "--workers",
        "4",
        "--panel-team",
        "3",
        "--panel-steps",
        "6",
        "--tiles",
        "4",
        "--block-cols",
        "6",
        "--compute-us",
        "100",
        "--comm-latency-us",
        "300",
        "--compute",
        "yield",
        "--gang",
        "naive",
        "--seed",
        "0",
        "--repeats",
        "1",
        "--watchdog-s",
        "5",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("deadlock_detected=true"));
    assert!(
        gangsteal::trace::read_events(&trace)
            .unwrap()
            .deadlock_detected
    );
}

#[test]
fn unwritable_trace_path_fails() {
    let out = run(&["--trace", "/nonexistent-dir/for/events.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("writing trace"));
}

#[test]
fn oversized_gang_panel_is_rejected() {
    let out = run(&["--panel-team", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot be reserved"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    for args in [
        &["run", "--kernel", "svd"][..],
        &["run", "--policy", "locality"],
        &["run", "--workers", "many"],
        &["run", "--gang", "maybe"],
        &["frobnicate"],
    ] {
        let out = bench(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn zero_workers_is_a_configuration_error() {
    let out = run(&["--workers", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_workers"));
}

#[test]
fn gang_sched_environment_selects_the_panel_mode() {
    let args = with(&["--json"]);
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(&args)
        .env("GANG_SCHED", "0")
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["spec"]["gang"], "off");
}
