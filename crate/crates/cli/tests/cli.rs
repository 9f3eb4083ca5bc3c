//! End-to-end checks of the `leopard` binary: outputs and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "stream": {
    "n_source_batches": 3,
    "n_target_batches": 3,
    "source_batch_size": 30,
    "target_batch_size": 30,
    "source_drift_batch": 2,
    "target_drift_batch": 3
  },
  "learner": { "init_epochs": 2, "epochs": 1 },
  "n_runs": 2,
  "seeds": [1, 2],
  "sweep_proportions": [0.1, 0.3]
}"#;

fn leopard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leopard"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(config_text: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, config_text).unwrap();
    let out = dir.path().join("out");
    (dir, config, out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_metrics_and_summary() {
    let (_d, config, out) = setup(TINY);
    let o = leopard(&["run", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["metrics.jsonl", "summary.json", "protocol.json", "config.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([1, 2]));
}

#[test]
fn ablation_a_turns_every_switch_off() {
    let (_d, config, out) = setup(TINY);
    let o = leopard(&["run", "--config", s(&config), "--out", s(&out), "--ablation", "A", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(
        saved["switches"],
        serde_json::json!({"structure_learning": false, "kl_loss": false, "cd_loss": false})
    );
    assert_eq!(saved["seeds"], serde_json::json!([7]));
}

#[test]
fn missing_config_exits_2_without_writing() {
    let (_d, config, out) = setup(TINY);
    let absent = config.with_file_name("absent.json");
    let o = leopard(&["run", "--config", s(&absent), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let o = leopard(&["run", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_configs_and_usage_exit_2_without_writing() {
    let (_d, config, out) = setup(r#"{ "n_runs": 2, "seeds": [1], "bogus": 1 }"#);
    let o = leopard(&["run", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let (_d2, valid, _) = setup(TINY);
    let o = leopard(&["run", "--config", s(&valid), "--out", s(&out), "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = leopard(&["run", "--config", s(&valid), "--out", s(&out), "--ablation", "Z"]);
    assert_eq!(o.status.code(), Some(2));
    let o = leopard(&["baseline", "--config", s(&valid), "--out", s(&out), "--ablation", "A"]);
    assert_eq!(o.status.code(), Some(2));
    let o = leopard(&["explode", "--config", s(&valid)]);
    assert_eq!(o.status.code(), Some(2));

    let (_d3, semantic, _) = setup(r#"{ "stream": { "label_proportion": 1.5 } }"#);
    let o = leopard(&["run", "--config", s(&semantic), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let (d, config, _) = setup(TINY);
    let blocker = d.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let o = leopard(&["run", "--config", s(&config), "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn generate_baseline_sweep_and_diagnose_succeed() {
    let (_d, config, out) = setup(TINY);
    let o = leopard(&["generate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in ["seed1", "seed2"] {
        for f in ["prerecorded.csv", "source.csv", "target.csv"] {
            assert!(out.join(seed).join(f).is_file());
        }
    }

    let base = out.join("baseline");
    let o = leopard(&["baseline", "--config", s(&config), "--out", s(&base), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(base.join("summary.json").is_file());

    let sweep = out.join("sweep");
    let o = leopard(&["sweep", "--config", s(&config), "--out", s(&sweep), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("spread"));

    let diag = out.join("diag");
    let o = leopard(&["diagnose", "--config", s(&config), "--out", s(&diag), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(diag.join("diagnose.json")).unwrap()).unwrap();
    let d = reports[0]["divergence_after"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&d));
}
