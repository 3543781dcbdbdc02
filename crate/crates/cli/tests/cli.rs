//! Command-line behavior: config validation, override precedence, output
//! contracts, and failure modes.

use std::path::Path;
use std::process::{Command, Output};

fn reinopt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reinopt"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawn reinopt")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("missing {name} in {}: {e}", dir.display()))
}

#[test]
fn baseline_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(&["baseline", "--seed", "1", "--eval-m", "16384"], dir.path());
    assert!(out.status.success());
    let csv = read(dir.path(), "baseline.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("m,ruin_prob,stderr"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[0], "16384");
    let ruin: f64 = fields[1].parse().unwrap();
    assert!(ruin > 0.0 && ruin < 1.0, "implausible ruin estimate {ruin}");

    let manifest = read(dir.path(), "manifest.txt");
    assert!(manifest.contains("command = \"baseline\""));
    assert!(manifest.contains("seed = 1"));
    assert!(manifest.contains("eval_m = 16384"));
    assert!(manifest.contains("timestamp = "));
}

#[test]
fn invalid_loadings_fail_with_named_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &["baseline", "--theta", "0.4", "--eta", "0.5"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("theta must exceed eta"),
        "stderr must name the violated constraint: {stderr}"
    );
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, "lambada = 2.0\n").unwrap();
    let out = reinopt(
        &["baseline", "--config", config.to_str().unwrap()],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown config key `lambada`"));
    assert!(stderr.contains("lambda"), "must list valid keys: {stderr}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, "beta = 0.4\nseed = 9\n").unwrap();
    let out = reinopt(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--beta",
            "1.0",
            "--n-batches",
            "2",
            "--batch-size",
            "64",
            "--eval-batch-size",
            "256",
            "--hidden-layers",
            "4",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = read(dir.path(), "manifest.txt");
    assert!(manifest.contains("beta = 1"), "flag must win: {manifest}");
    assert!(manifest.contains("seed = 9"), "file value must survive");
}

#[test]
fn pareto_writes_one_row_per_beta_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &[
            "pareto",
            "--betas",
            "0,0.5,1",
            "--n-batches",
            "2",
            "--batch-size",
            "64",
            "--eval-batch-size",
            "256",
            "--eval-m",
            "1024",
            "--hidden-layers",
            "4",
            "--seed",
            "2",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = read(dir.path(), "pareto.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines.len(),
        1 + 3 + 1,
        "header, three points, one baseline row: {csv}"
    );
    assert_eq!(
        lines[0],
        "beta,expected_utility,survival_prob,ruin_prob,surrogate"
    );
    assert!(
        lines[4].starts_with(','),
        "baseline row carries an empty beta cell: {}",
        lines[4]
    );
    // One checkpoint per trained point.
    for k in 0..3 {
        let matches: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().to_string())
            .filter(|n| n.starts_with(&format!("policy_{k:02}_beta_")) && n.ends_with(".bin"))
            .collect();
        assert_eq!(matches.len(), 1, "expected one checkpoint for point {k}");
    }
}

#[test]
fn unwritable_output_dir_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "not a directory").unwrap();
    let target = blocker.join("sub");
    let out = Command::new(env!("CARGO_BIN_EXE_reinopt"))
        .args(["baseline", "--eval-m", "1024"])
        .arg("--out")
        .arg(&target)
        .output()
        .expect("spawn reinopt");
    assert!(!out.status.success());
    assert!(!target.exists(), "no partial outputs may appear");
}

#[test]
fn retention_curve_requires_a_shared_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &[
            "train",
            "--per-step-networks",
            "true",
            "--n-batches",
            "2",
            "--batch-size",
            "64",
            "--eval-batch-size",
            "256",
            "--hidden-layers",
            "4",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let policy = dir.path().join("policy.bin");
    let out = reinopt(
        &["retention-curve", "--policy", policy.to_str().unwrap()],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("shared"),
        "must explain the per-step limitation: {stderr}"
    );
}

#[test]
fn train_log_has_validation_at_epoch_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &[
            "train",
            "--n-batches",
            "20",
            "--batch-size",
            "64",
            "--eval-batch-size",
            "256",
            "--hidden-layers",
            "4",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let log = read(dir.path(), "train_log.csv");
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iteration,lr,train_objective,validation_objective");
    assert_eq!(lines.len(), 21, "header plus one row per batch");
    // Batches 10 and 20 close an epoch; their rows carry a validation value.
    assert!(!lines[10].ends_with(','), "epoch row must have validation");
    assert!(lines[1].ends_with(','), "mid-epoch row has empty validation");
    let summary = read(dir.path(), "train_summary.txt");
    assert!(summary.contains("stop_reason ="));
    assert!(summary.contains("test_ruin_prob ="));
}

#[test]
fn manifest_replays_as_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &["baseline", "--seed", "11", "--eval-m", "4096", "--lambda", "1.5"],
        dir.path(),
    );
    assert!(out.status.success());
    let manifest_path = dir.path().join("manifest.txt");
    let rerun_dir = tempfile::tempdir().unwrap();
    let out = reinopt(
        &["baseline", "--config", manifest_path.to_str().unwrap()],
        rerun_dir.path(),
    );
    assert!(
        out.status.success(),
        "manifest must reload as a config: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        read(dir.path(), "baseline.csv"),
        read(rerun_dir.path(), "baseline.csv"),
        "replayed manifest must reproduce the same estimate"
    );
}
