//! End-to-end tests of the `liouville-flow` binary: exit codes, the
//! machine-readable error contract, artifact layout, byte-level determinism,
//! and the verify report's published schema.

use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_liouville-flow");

/// Runs the binary, returning (exit code, stdout).
fn run(args: &[&str]) -> (i32, String) {
    let output = Command::new(BIN).args(args).output().expect("binary must spawn");
    let code = output.status.code().expect("must exit, not be signalled");
    (code, String::from_utf8(output.stdout).expect("stdout must be UTF-8"))
}

fn write_config(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

/// Parses the single-line error JSON the binary prints on failure.
fn error_kind(stdout: &str) -> String {
    let doc: Value = serde_json::from_str(stdout.trim()).unwrap_or_else(|e| {
        panic!("failure output must be machine-readable JSON, got {stdout:?}: {e}")
    });
    doc["kind"].as_str().expect("error JSON must carry a kind").to_string()
}

fn train_config(n: usize, iterations: usize) -> Value {
    serde_json::json!({
        "command": "train",
        "beckmann": {"family": "bump", "beta": 0.5, "n": n},
        "spatial_dim": 2,
        "hidden": [4, 4],
        "steps": 8,
        "init_scale": 6.0,
        "learning_rate": 0.2,
        "iterations": iterations
    })
}

// ---------------------------------------------------------------------------
// A minimal JSON-Schema-subset validator (type / enum / required /
// properties / additionalProperties / items), enough to hold the binary to
// the schema file it publishes.
// ---------------------------------------------------------------------------

fn type_matches(name: &str, doc: &Value) -> bool {
    match name {
        "object" => doc.is_object(),
        "array" => doc.is_array(),
        "string" => doc.is_string(),
        "number" => doc.is_number(),
        "integer" => doc.is_i64() || doc.is_u64(),
        "boolean" => doc.is_boolean(),
        "null" => doc.is_null(),
        other => panic!("unsupported schema type `{other}`"),
    }
}

fn validate(schema: &Value, doc: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(ty) = schema.get("type") {
        let names: Vec<&str> = match ty {
            Value::String(s) => vec![s.as_str()],
            Value::Array(xs) => xs.iter().map(|x| x.as_str().unwrap()).collect(),
            other => panic!("unsupported type clause {other}"),
        };
        if !names.iter().any(|n| type_matches(n, doc)) {
            errors.push(format!("{path}: expected type {names:?}, got {doc}"));
            return;
        }
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(doc) {
            errors.push(format!("{path}: {doc} not in enum {allowed:?}"));
        }
    }
    if let Some(required) = schema.get("required").and_then(Value::as_array) {
        for key in required {
            let key = key.as_str().unwrap();
            if doc.get(key).is_none() {
                errors.push(format!("{path}: missing required key `{key}`"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        if let Some(obj) = doc.as_object() {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    validate(sub, v, &format!("{path}.{key}"), errors);
                }
            }
            if schema.get("additionalProperties") == Some(&Value::Bool(false)) {
                for key in obj.keys() {
                    if !props.contains_key(key) {
                        errors.push(format!("{path}: unexpected key `{key}`"));
                    }
                }
            }
        }
    }
    if let Some(items) = schema.get("items") {
        if let Some(xs) = doc.as_array() {
            for (i, x) in xs.iter().enumerate() {
                validate(items, x, &format!("{path}[{i}]"), errors);
            }
        }
    }
}

fn assert_matches_verify_schema(report: &str) {
    let schema_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/verify-report.schema.json");
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(schema_path).unwrap()).unwrap();
    let doc: Value = serde_json::from_str(report).unwrap();
    let mut errors = Vec::new();
    validate(&schema, &doc, "$", &mut errors);
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

// ---------------------------------------------------------------------------
// Usage errors: exit 2 with a named kind
// ---------------------------------------------------------------------------

#[test]
fn unreadable_config_is_a_usage_error() {
    let (code, out) = run(&["train", "--config", "/no/such/config.json", "--seed", "1", "--out", "/tmp/x"]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "config_not_found");
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = train_config(16, 1);
    doc["learning_rte"] = serde_json::json!(0.1);
    let config = write_config(tmp.path(), "c.json", &doc);
    let (code, out) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "1", "--out", tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "config_invalid");
    assert!(out.contains("learning_rte"), "offending key must be named: {out}");
}

#[test]
fn config_for_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &train_config(16, 1));
    let (code, out) = run(&["sample", "--config", config.to_str().unwrap(), "--seed", "1", "--out", "/tmp/x"]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "config_invalid");
}

#[test]
fn missing_dataset_missing_seed_and_missing_out_each_get_a_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = train_config(16, 1);
    doc.as_object_mut().unwrap().remove("beckmann");
    doc["dataset"] = serde_json::json!("never_written.csv");
    let config = write_config(tmp.path(), "missing_data.json", &doc);
    let out_dir = tmp.path().join("out");
    let (code, out) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "1", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "dataset_not_found");

    let config = write_config(tmp.path(), "ok.json", &train_config(16, 1));
    let (code, out) = run(&["train", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "seed_required");

    let (code, out) = run(&["train", "--config", config.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "output_required");
}

#[test]
fn malformed_dataset_csv_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.csv"), "x0,x1\n0.1,0.2\nnot,numbers\n").unwrap();
    let mut doc = train_config(16, 1);
    doc.as_object_mut().unwrap().remove("beckmann");
    doc["dataset"] = serde_json::json!("bad.csv");
    let config = write_config(tmp.path(), "c.json", &doc);
    let (code, out) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "1", "--out", tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "artifact_invalid");
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "s.json",
        &serde_json::json!({"command": "sample", "checkpoint": "nope.json", "count": 4}),
    );
    let (code, out) = run(&[
        "sample", "--config", config.to_str().unwrap(),
        "--seed", "1", "--out", tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stdout: {out}");
    assert_eq!(error_kind(&out), "checkpoint_not_found");
}

#[test]
fn bad_flags_exit_two() {
    let output = Command::new(BIN).arg("no-such-command").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = Command::new(BIN).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

// ---------------------------------------------------------------------------
// Computation failures: exit 1 with the library's error kind
// ---------------------------------------------------------------------------

#[test]
fn unrecoverable_guard_exits_one_with_its_kind() {
    let tmp = tempfile::tempdir().unwrap();
    // Formula-mode guard on a deep, saturated network: the sound bound is
    // astronomically large, so no affordable step count satisfies it.
    let doc = serde_json::json!({
        "command": "train",
        "beckmann": {"family": "bump", "beta": 0.5, "n": 8},
        "spatial_dim": 2,
        "hidden": [12, 12, 12],
        "steps": 2,
        "init_scale": 1000.0,
        "learning_rate": 0.1,
        "iterations": 1,
        "guard_mode": "formula"
    });
    let config = write_config(tmp.path(), "c.json", &doc);
    let (code, out) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "1", "--out", tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "stdout: {out}");
    assert_eq!(error_kind(&out), "guard_unrecoverable");
}

// ---------------------------------------------------------------------------
// Happy paths
// ---------------------------------------------------------------------------

#[test]
fn train_writes_artifacts_and_evaluate_reproduces_the_final_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "train.json", &train_config(64, 3));
    let out_dir = tmp.path().join("run");
    let (code, summary) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "11", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stdout: {summary}");
    let summary: Value = serde_json::from_str(&summary).unwrap();
    for name in ["checkpoint.json", "training_log.csv", "bound_ledger.json", "dataset.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }

    // The training log records initial + one row per iteration.
    let log = fs::read_to_string(out_dir.join("training_log.csv")).unwrap();
    let data_rows = log.lines().filter(|l| !l.starts_with('#') && !l.starts_with("iter")).count();
    assert_eq!(data_rows, 4, "3 iterations plus the initial row");

    // Evaluating the checkpoint on the dataset it was trained on must
    // reproduce the final training loss exactly: same model, same data,
    // same arithmetic.
    let eval = serde_json::json!({
        "command": "evaluate",
        "checkpoint": "run/checkpoint.json",
        "dataset": "run/dataset.csv",
        "target": {"family": "bump", "beta": 0.5},
        "grid_resolution": 64
    });
    let eval_config = write_config(tmp.path(), "eval.json", &eval);
    let (code, report) = run(&["evaluate", "--config", eval_config.to_str().unwrap()]);
    assert_eq!(code, 0, "stdout: {report}");
    let report: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["schema"], "liouville-flow/evaluation.v1");
    assert_eq!(report["nll"], summary["final_nll"]);
    assert!(report["kl"]["raw"].is_f64());
}

#[test]
fn zero_iterations_is_an_explicit_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "t.json", &train_config(32, 0));
    let out_dir = tmp.path().join("run");
    let (code, summary) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "5", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stdout: {summary}");
    let summary: Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(
        summary["initial_nll"], summary["final_nll"],
        "no updates may run when iterations is 0"
    );
    let log = fs::read_to_string(out_dir.join("training_log.csv")).unwrap();
    let data_rows = log.lines().filter(|l| !l.starts_with('#') && !l.starts_with("iter")).count();
    assert_eq!(data_rows, 1, "only the initial row");
}

#[test]
fn sampling_stays_in_the_domain_and_respects_count() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "t.json", &train_config(32, 1));
    let out_dir = tmp.path().join("run");
    let (code, _) = run(&[
        "train", "--config", config.to_str().unwrap(),
        "--seed", "3", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let sample = serde_json::json!({"command": "sample", "checkpoint": "run/checkpoint.json", "count": 40});
    let sample_config = write_config(tmp.path(), "s.json", &sample);
    let (code, _) = run(&[
        "sample", "--config", sample_config.to_str().unwrap(),
        "--seed", "9", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out_dir.join("samples.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with('x')) {
        let coords: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(coords.len(), 2);
        let r = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(r < 0.5, "sample outside the disc: {line}");
        rows += 1;
    }
    assert_eq!(rows, 40);
}

#[test]
fn beckmann_reports_a_tiny_transport_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = serde_json::json!({
        "command": "beckmann",
        "family": "bump",
        "beta": 0.5,
        "verify_steps": 32,
        "verify_grid": 64
    });
    let config = write_config(tmp.path(), "b.json", &doc);
    let out_dir = tmp.path().join("beck");
    let (code, report) = run(&["beckmann", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "stdout: {report}");
    let report: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["schema"], "liouville-flow/transport-report.v1");
    assert!(report["kl"].as_f64().unwrap() < 1e-4);
    assert!(report["max_continuity_residual"].as_f64().unwrap() < 1e-6);
    for name in ["problem.json", "field_grid.csv", "transport_report.json"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
}

#[test]
fn bounds_carries_the_worked_example_and_warns_on_infeasible_schedules() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = serde_json::json!({
        "command": "bounds",
        "spatial_dim": 1,
        "depth": 1,
        "width": 2,
        "step_size": 0.02,
        "schedule": {"n": 1000, "p": 0.5}
    });
    let config = write_config(tmp.path(), "b.json", &doc);
    let (code, report) = run(&["bounds", "--config", config.to_str().unwrap()]);
    assert_eq!(code, 0, "an infeasible schedule is a finding, not a failure: {report}");
    let report: Value = serde_json::from_str(&report).unwrap();
    // The worked anchor: log Λ = ln(8·√5) for d=1, L=1, W=2.
    let log_lambda = report["ledger"]["constants"]["jacobian_bound"]["log"].as_f64().unwrap();
    assert!((log_lambda - (8.0 * 5.0f64.sqrt()).ln()).abs() < 1e-12);
    assert_eq!(report["pac_schedule"]["feasible"], false);
    let warnings = report["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.as_str().unwrap().contains("infeasible")),
        "warnings: {warnings:?}"
    );
}

// ---------------------------------------------------------------------------
// The verify suite and its schema
// ---------------------------------------------------------------------------

#[test]
fn verify_passes_matches_its_schema_and_detects_injected_defects() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "v.json", &serde_json::json!({"command": "verify"}));
    let out_dir = tmp.path().join("v");
    let (code, report) = run(&["verify", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "stdout: {report}");
    assert_matches_verify_schema(&report);
    let doc: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(doc["status"], "pass");
    assert_eq!(doc["checks"].as_array().unwrap().len(), 6);
    assert_eq!(fs::read_to_string(out_dir.join("verify_report.json")).unwrap(), report);

    let bad = write_config(
        tmp.path(),
        "vbad.json",
        &serde_json::json!({"command": "verify", "inject_defect": "continuity"}),
    );
    let (code, report) = run(&["verify", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1, "a failing check must fail the run: {report}");
    assert_matches_verify_schema(&report);
    let doc: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(doc["status"], "fail");
    let failing: Vec<&str> = doc["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["status"] == "fail")
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failing, ["continuity_residual"], "exactly the corrupted check must fail");
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

#[test]
fn identical_seeds_reproduce_artifacts_byte_for_byte_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "t.json", &train_config(48, 2));
    let mut logs = Vec::new();
    let mut datasets = Vec::new();
    let mut samples = Vec::new();
    for (run_dir, threads) in [("a", "1"), ("b", "4")] {
        let out_dir = tmp.path().join(run_dir);
        let (code, _) = run(&[
            "train", "--config", config.to_str().unwrap(),
            "--seed", "21", "--out", out_dir.to_str().unwrap(),
            "--threads", threads,
        ]);
        assert_eq!(code, 0);
        let sample = serde_json::json!({
            "command": "sample",
            "checkpoint": format!("{run_dir}/checkpoint.json"),
            "count": 25
        });
        let sample_config = write_config(tmp.path(), &format!("s_{run_dir}.json"), &sample);
        let (code, _) = run(&[
            "sample", "--config", sample_config.to_str().unwrap(),
            "--seed", "2", "--out", out_dir.to_str().unwrap(),
            "--threads", threads,
        ]);
        assert_eq!(code, 0);
        logs.push(fs::read(out_dir.join("training_log.csv")).unwrap());
        datasets.push(fs::read(out_dir.join("dataset.csv")).unwrap());
        samples.push(fs::read(out_dir.join("samples.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1], "training logs must be byte-identical");
    assert_eq!(datasets[0], datasets[1], "datasets must be byte-identical");
    assert_eq!(samples[0], samples[1], "sample files must be byte-identical");
}

#[test]
fn different_seeds_produce_different_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "t.json", &train_config(48, 2));
    let mut logs = Vec::new();
    for (run_dir, seed) in [("a", "21"), ("b", "22")] {
        let out_dir = tmp.path().join(run_dir);
        let (code, _) = run(&[
            "train", "--config", config.to_str().unwrap(),
            "--seed", seed, "--out", out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        logs.push(fs::read(out_dir.join("training_log.csv")).unwrap());
    }
    assert_ne!(logs[0], logs[1], "the seed must actually steer the run");
}
