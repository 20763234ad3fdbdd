use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use loomtune::workloads::Workload;
use loomtune_cli::*;
use tempfile::TempDir;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
  "tasks": [{ "name": "mm", "workload": { "kind": "matmul", "n": 32, "m": 32, "k": 32 } }],
  "settings": { "seed": 4, "budget": 6 }
}"#;

fn tuned_log(dir: &Path) -> PathBuf {
    let cfg = load_config(&write_config(dir, SMALL), None, &Overrides::default()).unwrap();
    let log = dir.join("run.jsonl");
    cmd_tune(&cfg, &log).unwrap();
    log
}

fn config_error(body: &str) -> String {
    let dir = TempDir::new().unwrap();
    match load_config(&write_config(dir.path(), body), None, &Overrides::default()) {
        Err(e @ CliError::Config { .. }) => e.to_string(),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn unknown_fields_are_named() {
    let msg = config_error(r#"{ "tasks": [], "setings": {} }"#);
    assert!(msg.contains("setings"), "{msg}");
    let msg = config_error(
        r#"{ "tasks": [{ "name": "a", "workload": { "kind": "matmul", "n": 4, "m": 4, "k": 4, "x": 1 } }] }"#,
    );
    assert!(msg.contains('x'), "{msg}");
}

#[test]
fn invalid_workloads_point_at_the_task() {
    let msg =
        config_error(r#"{ "tasks": [{ "name": "a", "workload": { "kind": "matmul", "n": 0, "m": 4, "k": 4 } }] }"#);
    assert!(msg.contains("tasks[0]"), "{msg}");
    let msg = config_error(
        r#"{ "tasks": [{ "name": "g", "workload": { "kind": "grouped_conv", "batch": 1, "h": 8, "w": 8,
             "ci": 6, "co": 8, "kernel": 3, "groups": 4 } }] }"#,
    );
    assert!(msg.contains("tasks[0]"), "{msg}");
}

#[test]
fn empty_task_list_and_small_budget_are_rejected() {
    config_error(r#"{ "tasks": [] }"#);
    let msg = config_error(
        r#"{ "tasks": [
              { "name": "a", "workload": { "kind": "matmul", "n": 4, "m": 4, "k": 4 } },
              { "name": "b", "workload": { "kind": "matmul", "n": 8, "m": 4, "k": 4 } }],
            "settings": { "budget": 1 } }"#,
    );
    assert!(msg.contains("budget"), "{msg}");
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), SMALL);
    let none = Overrides::default();
    assert_eq!(load_config(&path, None, &none).unwrap().settings.seed, 4);
    assert_eq!(load_config(&path, Some("17"), &none).unwrap().settings.seed, 17);
    let flag = Overrides {
        seed: Some(99),
        budget: Some(3),
    };
    let cfg = load_config(&path, Some("17"), &flag).unwrap();
    assert_eq!((cfg.settings.seed, cfg.settings.budget), (99, 3));
    assert!(matches!(
        load_config(&path, Some("minus one"), &none),
        Err(CliError::Config { .. })
    ));
}

#[test]
fn workload_listing_is_sorted_and_parses_back() {
    let lines = cmd_list_workloads();
    assert_eq!(lines.len(), Workload::registry().len());
    let mut sorted = lines.clone();
    sorted.sort();
    assert_eq!(lines, sorted);
    for line in &lines {
        let (kind, params) = line.split_once(' ').unwrap();
        let mut v = serde_json::json!({ "kind": kind });
        for kv in params.split_whitespace() {
            let (k, n) = kv.split_once('=').unwrap();
            v[k] = n.parse::<u64>().unwrap().into();
        }
        let w: Workload = serde_json::from_value(v).unwrap();
        w.check().unwrap();
        assert_eq!(w.kind(), kind);
    }
}

#[test]
fn tune_replay_curve_and_eval() {
    let dir = TempDir::new().unwrap();
    let log = tuned_log(dir.path());

    let rep = cmd_replay(&log).unwrap();
    assert!(rep.is_clean(), "{:?}", rep.problems);
    assert_eq!(rep.units, 6);

    let csv_path = dir.path().join("curve.csv");
    let rows = cmd_export_curve(&log, &csv_path).unwrap();
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["iteration", "task", "best_cost", "objective"]
    );
    let best: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(best.len(), rows);
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");

    let a = cmd_eval_model(&log, 10, 3).unwrap();
    let b = cmd_eval_model(&log, 10, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train + a.test, rep.measurements);
    assert!(matches!(cmd_eval_model(&log, 0, 3), Err(CliError::InsufficientData(_))));
}

#[test]
fn eval_refuses_tiny_logs() {
    let dir = TempDir::new().unwrap();
    let cfg = load_config(
        &write_config(dir.path(), SMALL),
        None,
        &Overrides {
            seed: None,
            budget: Some(1),
        },
    )
    .unwrap();
    let log = dir.path().join("tiny.jsonl");
    cmd_tune(&cfg, &log).unwrap();
    match cmd_eval_model(&log, 5, 0) {
        Err(CliError::InsufficientData(msg)) => assert!(msg.contains("50"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_loomtune");
    let dir = TempDir::new().unwrap();
    let log = tuned_log(dir.path());

    let ok = Command::new(bin).arg("replay").arg(&log).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    // Rewrite one logged cost so replay disagrees with it.
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let i = lines
        .iter()
        .position(|l| l.contains("\"type\":\"measure\"") && l.contains("\"cost\":"))
        .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
    v["cost"] = serde_json::json!(v["cost"].as_f64().unwrap() * 2.0);
    lines[i] = v.to_string();
    let tampered = dir.path().join("tampered.jsonl");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let bad = Command::new(bin).arg("replay").arg(&tampered).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("mismatch"));

    let cfg = write_config(dir.path(), r#"{ "tasks": 3 }"#);
    let err = Command::new(bin)
        .args(["tune", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).starts_with("error: config"));

    let missing = Command::new(bin)
        .args(["replay", "/nonexistent/log.jsonl"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
