use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_babel-miner");

const PIPELINE: [&str; 9] = [
    "synth", "ingest", "mine", "label", "pairs", "augment", "train-toy", "fuse", "metrics",
];

/// A ten-landmark fixture and a short schedule keep each run near a second.
const SMALL: [&str; 9] = [
    "synth.landmarks=10",
    "synth.filler_regions=2",
    "synth.thresholds.min_landmarks=8",
    "mining.min_landmarks=8",
    "train.schedule.epochs=4",
    "train.schedule.steps_per_epoch=3",
    "train.schedule.decay_epochs=[3]",
    "train.schedule.pretrain_epochs=1",
    "pairs.batches=2",
];

fn run_in(cwd: &Path, args: &[&str], extra: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(cwd).args(args);
    for kv in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(kv);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn babel-miner")
}

fn ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr line");
    let v: serde_json::Value = serde_json::from_str(line).expect("JSON error record");
    assert_eq!(v["status"], "error");
    v
}

fn pipeline(cwd: &Path, env: &[(&str, &str)]) {
    for cmd in PIPELINE {
        ok(&run_in(cwd, &[cmd], &[], env), cmd);
    }
}

fn manifest(cwd: &Path) -> BTreeMap<String, String> {
    let text = std::fs::read_to_string(cwd.join("run/manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn concepts(cwd: &Path) -> Vec<serde_json::Value> {
    let text = std::fs::read_to_string(cwd.join("run/mine/concepts.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["concepts"].as_array().expect("concept list").clone()
}

#[test]
fn pipeline_runs_end_to_end_and_records_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[]);
    let m = manifest(dir.path());
    for key in [
        "config.effective.toml",
        "ingest/index_stats.json",
        "mine/concepts.json",
        "label/labels.jsonl",
        "label/splits.json",
        "pairs/pairs.jsonl",
        "augment/captions.jsonl",
        "train/model.ckpt",
        "fuse/summary.json",
        "metrics/report.json",
    ] {
        assert!(m.contains_key(key), "manifest lacks {key}");
    }
    for (key, hash) in &m {
        let bytes = std::fs::read(dir.path().join("run").join(key)).unwrap();
        let digest = babel_sha256(&bytes);
        assert_eq!(&digest, hash, "{key}");
    }
    let mut nouns: Vec<String> = concepts(dir.path())
        .iter()
        .map(|c| c["noun"].as_str().unwrap().to_owned())
        .collect();
    nouns.sort();
    assert_eq!(nouns, ["facade", "nave", "portal"]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/metrics/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report.is_object());
}

fn babel_sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn reruns_are_byte_identical_across_directories_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[("BABEL_MINER_THREADS", "1")]);
    let ma = manifest(a.path());
    let mb = manifest(b.path());
    assert_eq!(ma.len(), mb.len());
    for (key, hash) in &ma {
        assert_eq!(mb.get(key), Some(hash), "{key} differs between runs");
    }
    // Rerunning in place rewrites the same bytes.
    pipeline(a.path(), &[]);
    assert_eq!(manifest(a.path()), ma);
}

#[test]
fn different_seed_changes_artifacts() {
    let a = tempfile::tempdir().unwrap();
    for cmd in ["synth", "ingest"] {
        ok(&run_in(a.path(), &[cmd], &[], &[]), cmd);
        ok(&run_in(a.path(), &["--output", "other", "--seed", "7", cmd], &[], &[]), cmd);
    }
    let x = std::fs::read(a.path().join("run/fixture/corpus.jsonl")).unwrap();
    let y = std::fs::read(a.path().join("other/fixture/corpus.jsonl")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn unreachable_density_gives_empty_concept_set() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run_in(dir.path(), &["synth", "--no-images"], &[], &[]), "synth");
    let out = run_in(dir.path(), &["mine"], &["mining.min_rho=1.1"], &[]);
    ok(&out, "mine");
    assert!(concepts(dir.path()).is_empty());
    // Labeling has nothing to work with and says so.
    let out = run_in(dir.path(), &["label"], &["mining.min_rho=1.1"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["command"], "label");
}

#[test]
fn unknown_subcommand_reports_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).current_dir(dir.path()).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v = error_record(&out);
    assert_eq!(v["kind"], "usage");
    assert!(v["command"].is_null());
}

#[test]
fn bad_overrides_and_missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["mine"], &["mining.no_such_field=1"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "config");

    let out = run_in(dir.path(), &["mine"], &["mining.min_rho=0"], &[]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_in(dir.path(), &["pairs"], &[], &[]);
    assert_eq!(out.status.code(), Some(1));
    let v = error_record(&out);
    assert_eq!(v["kind"], "missing_input");
    assert_eq!(v["command"], "pairs");

    let out = run_in(dir.path(), &["ingest"], &[], &[("BABEL_MINER_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn effective_config_reloads_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &run_in(dir.path(), &["--seed", "11", "synth", "--no-images"], &["fusion.phi=[0.6]"], &[]),
        "synth",
    );
    let first = std::fs::read_to_string(dir.path().join("run/config.effective.toml")).unwrap();
    assert!(first.contains("seed = 11"));
    std::fs::write(dir.path().join("saved.toml"), &first).unwrap();
    let out = Command::new(BIN)
        .current_dir(dir.path())
        .args(["--config", "saved.toml", "ingest"])
        .output()
        .unwrap();
    ok(&out, "ingest from saved config");
    let second = std::fs::read_to_string(dir.path().join("run/config.effective.toml")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .current_dir(dir.path())
        .args(["selftest", "--seeds", "10", "--instances", "10"])
        .output()
        .unwrap();
    ok(&out, "selftest");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/selftest/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report.to_string().contains("\"passed\":true"));
    assert!(!report.to_string().contains("\"passed\":false"));
}
