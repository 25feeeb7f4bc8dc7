//! End-to-end runs of the `kglab` binary on the toy graph.

mod common;

use std::fs;

use common::{kglab, kglab_ok, write_toy_config};

#[test]
fn ingest_reports_counts_and_writes_stable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "masked_entity", 5);
    let cfg = cfg.to_str().unwrap();
    let report = kglab_ok(&["ingest", "--config", cfg]);
    assert_eq!(report, serde_json::json!({"entities": 20, "relations": 5, "train": 19, "valid": 2, "test": 3}));
    let snap = dir.path().join("out/snapshot.json");
    let first = fs::read(&snap).unwrap();
    kglab_ok(&["ingest", "--config", cfg]);
    assert_eq!(first, fs::read(&snap).unwrap());
}

#[test]
fn missing_input_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "masked_entity", 5);
    let text = fs::read_to_string(&cfg).unwrap().replace("train.tsv", "nope.tsv");
    fs::write(&cfg, text).unwrap();
    let run = kglab(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert!(!run.success);
    assert!(run.stdout.is_empty());
    assert!(run.stderr.contains("nope.tsv"), "{}", run.stderr);

    let run = kglab(&["ingest", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert!(!run.success);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "masked_entity", 5);
    let text = fs::read_to_string(&cfg).unwrap().replace("batch_size", "batchsize");
    fs::write(&cfg, text).unwrap();
    let run = kglab(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!run.success);
    assert!(run.stderr.contains("configuration"), "{}", run.stderr);
}

#[test]
fn fast_run_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "two_tower", 50);
    let cfg = cfg.to_str().unwrap();
    let start = std::time::Instant::now();
    let first = kglab_ok(&["train", "--config", cfg, "--fast-run"]);
    assert!(start.elapsed().as_secs() < 30);
    assert_eq!(first["epoch"], 2);
    // 38 queries in batches of 8 is 5 batches per epoch
    assert_eq!(first["step"], 10);

    let resumed = kglab_ok(&["train", "--config", cfg, "--resume", "--epochs", "4"]);
    assert_eq!(resumed["epoch"], 4);
    assert_eq!(resumed["step"], 20);
    let logs = common::logs_without_timestamps(&dir.path().join("out/logs.jsonl"));
    let epochs: Vec<u64> = logs
        .iter()
        .filter(|r| r["metrics"].get("train_loss").is_some())
        .map(|r| r["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3, 4]);
}

#[test]
fn resume_needs_matching_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "masked_entity", 2);
    let run = kglab(&["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(!run.success);
}

#[test]
fn eval_counts_follow_directions_and_memorized_train_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "masked_entity", 200);
    let cfg = cfg.to_str().unwrap();
    kglab_ok(&["ingest", "--config", cfg]);
    kglab_ok(&["train", "--config", cfg]);
    let both = kglab_ok(&["eval", "--config", cfg]);
    assert_eq!(both["metrics"]["count"], 6);
    let tail = kglab_ok(&["eval", "--config", cfg, "--directions", "tail"]);
    assert_eq!(tail["metrics"]["count"], 3);
    let ranks = dir.path().join("ranks.tsv");
    let train = kglab_ok(&["eval", "--config", cfg, "--split", "train", "--ranks", ranks.to_str().unwrap()]);
    assert_eq!(train["metrics"]["hits1"], 1.0);
    assert_eq!(fs::read_to_string(&ranks).unwrap().lines().count(), 38);
    let written: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(written, train);

    let top = kglab_ok(&["predict", "--config", cfg, "--entity", "e02", "--relation", "r1", "--top-n", "2"]);
    assert_eq!(top.as_array().unwrap().len(), 2);
    assert_eq!(top[0]["entity"], "e07");
    let head = kglab_ok(&["predict", "--config", cfg, "--entity", "e07", "--relation", "r1", "--direction", "head"]);
    assert_eq!(head.as_array().unwrap().len(), 5);
    let qa = kglab_ok(&["predict", "--config", cfg, "--question", "banana [E1] [SEP] has color", "--top-n", "1"]);
    assert_eq!(qa[0]["name"], "yellow");
}

#[test]
fn generation_model_evaluates_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "generation", 1);
    let out = kglab_ok(&["eval", "--config", cfg.to_str().unwrap(), "--directions", "tail"]);
    assert_eq!(out["metrics"]["count"], 3);
    let run = kglab(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!run.success);
}

#[test]
fn llm_mock_and_missing_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), "llm", 1);
    let cfg = cfg.to_str().unwrap();
    let perfect = kglab_ok(&["llm", "--config", cfg, "--mock", "perfect", "--sample", "3"]);
    assert_eq!(perfect["hits1"], 1.0);
    let transcript = fs::read_to_string(dir.path().join("out/transcript.jsonl")).unwrap();
    assert_eq!(transcript.lines().count(), 3);
    let adversarial = kglab_ok(&["llm", "--config", cfg, "--mock", "adversarial"]);
    assert_eq!(adversarial["hits1"], 0.0);

    let run = kglab(&["llm", "--config", cfg]);
    assert!(!run.success);
    assert!(run.stderr.contains("KGLAB_API_BASE"), "{}", run.stderr);
    let run = kglab(&["llm", "--config", cfg, "--mock", "perfect", "--sample", "4"]);
    assert!(!run.success, "sample larger than the test split");
}

#[test]
fn cost_table() {
    let rows = kglab_ok(&["cost", "-l", "2", "-e", "3", "-r", "5"]);
    assert_eq!(rows.as_array().unwrap().len(), 6);
    let one = kglab_ok(&["cost", "--method", "SimKGC", "--length", "4", "--entities", "10", "--relations", "2"]);
    assert_eq!(one[0]["value"], 4.0 * 10.0 * 3.0);
    assert!(!kglab(&["cost", "--method", "nope", "-l", "1", "-e", "1", "-r", "1"]).success);
    assert!(!kglab(&["cost", "-l", "0", "-e", "1", "-r", "1"]).success);
}
