//! End-to-end behavior of the `wdmoe` binary: exit codes, artifacts,
//! and config error reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wdmoe_core::trace::load_trace;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wdmoe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two-device config with the given policies array and trace object,
/// written into `dir`.
fn write_config(dir: &Path, policies: &str, trace: &str) -> PathBuf {
    let body = format!(
        r#"{{
  "radio": {{ "carrier_ghz": 3.5, "noise_psd_dbm_hz": -174.0, "total_bandwidth_hz": 1.0e8 }},
  "devices": [
    {{ "id": 0, "distance_m": 50.0, "p_down_w": 2.0, "p_up_w": 0.1, "compute_flops": 5.0e12 }},
    {{ "id": 1, "distance_m": 180.0, "p_down_w": 2.0, "p_up_w": 0.1, "compute_flops": 1.25e12 }}
  ],
  "dims": {{ "embed_dim": 256, "hidden_dim": 1024, "quant_bits": 16,
            "act_flops_per_elem": 4, "num_blocks": 2, "num_experts": 2 }},
  "policies": {policies},
  "seed": 7,
  "batches": 3,
  "trace": {trace}
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

fn synth_source() -> &'static str {
    r#"{ "synth": { "seed": 11, "blocks": 2, "tokens": 8, "experts": 2, "peakedness": 3.0 } }"#
}

const ALL_POLICIES: &str = r#"["baseline_top2_uniform", "wdmoe_full", "wdmoe_no_selection", "wdmoe_no_bandwidth", "testbed"]"#;

#[test]
fn help_and_version_exit_zero() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
    assert!(run(&["simulate", "--help"]).status.success());
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = run(&["simulate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = run(&["simulate", "--config", "/no/such/config.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("cannot read config"));
}

#[test]
fn malformed_json_reports_the_offending_line() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"radio\": {,\n}\n").unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("line 2"), "{}", stderr_of(&out));
}

#[test]
fn unknown_config_fields_are_rejected_with_a_location() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("typo.json");
    fs::write(&path, r#"{ "radioo": { "carrier_ghz": 3.5 } }"#).unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("radioo") && err.contains("line"), "{err}");
}

#[test]
fn empty_policy_list_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), "[]", synth_source());
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("no policies"));
}

#[test]
fn ambiguous_trace_source_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let both = r#"{ "path": "t.wdmt", "synth": { "seed": 1, "blocks": 1, "tokens": 2, "experts": 2, "peakedness": 1.0 } }"#;
    let path = write_config(dir.path(), r#"["wdmoe_full"]"#, both);
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let neither = write_config(dir.path(), r#"["wdmoe_full"]"#, "{ }");
    let out = run(&["simulate", "--config", neither.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("neither"));
}

#[test]
fn missing_trace_file_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let path = write_config(
        dir.path(),
        r#"["wdmoe_full"]"#,
        r#"{ "path": "/no/such/trace.wdmt" }"#,
    );
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("cannot load trace"));
}

#[test]
fn simulate_writes_both_artifacts_with_one_row_per_policy() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), ALL_POLICIES, synth_source());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "policy,total_latency_s,wlr_total,active_pairs");
    assert_eq!(lines.len(), 6);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 5);
    assert_eq!(report["reports"][0]["policy"], "baseline_top2_uniform");
}

#[test]
fn simulate_honors_a_thread_cap() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), r#"["wdmoe_full"]"#, synth_source());
    let out_dir = dir.path().join("out");
    let out = bin()
        .env("WDMOE_THREADS", "1")
        .args(["simulate", "--config", path.to_str().unwrap()])
        .args(["--out-dir", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = bin()
        .env("WDMOE_THREADS", "zero")
        .args(["simulate", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_rejects_bad_ranges_and_point_counts() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), r#"["wdmoe_full"]"#, synth_source());
    let cfg = path.to_str().unwrap();
    let bad_range = run(&[
        "sweep", "--config", cfg, "--b-min", "5e7", "--b-max", "2e7", "--points", "3",
    ]);
    assert_eq!(bad_range.status.code(), Some(1));
    let one_point = run(&[
        "sweep", "--config", cfg, "--b-min", "2e7", "--b-max", "5e7", "--points", "1",
    ]);
    assert_eq!(one_point.status.code(), Some(1));
}

#[test]
fn sweep_emits_one_row_per_policy_and_bandwidth() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), ALL_POLICIES, synth_source());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        path.to_str().unwrap(),
        "--b-min",
        "2e7",
        "--b-max",
        "1e8",
        "--points",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "bandwidth_hz,policy,latency_s");
    assert_eq!(lines.len(), 1 + 5 * 3);
    assert!(lines[1].starts_with("20000000,baseline_top2_uniform,"));
    assert!(lines[3].starts_with("100000000,baseline_top2_uniform,"));
}

#[test]
fn synth_trace_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.wdmt");
    let b = dir.path().join("b.wdmt");
    for path in [&a, &b] {
        let out = run(&[
            "synth-trace",
            "--seed",
            "3",
            "--blocks",
            "2",
            "--tokens",
            "8",
            "--experts",
            "4",
            "--peakedness",
            "2.0",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let trace = load_trace::<f64>(&a).unwrap();
    assert_eq!(trace.num_blocks(), 2);
    assert_eq!(trace.num_tokens(), 8);
    assert_eq!(trace.num_experts(), 4);
}

#[test]
fn synth_trace_rejects_degenerate_shapes() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "synth-trace",
        "--seed",
        "3",
        "--blocks",
        "0",
        "--tokens",
        "8",
        "--experts",
        "4",
        "--peakedness",
        "2.0",
        "--out",
        dir.path().join("t.wdmt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_requires_a_readable_config() {
    let out = run(&["verify", "--config", "/no/such/config.json"]);
    assert_eq!(out.status.code(), Some(1));
}
