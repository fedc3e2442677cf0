//! End-to-end smoke tests for the `comaml` binary: exit codes, artifact
//! layout, flag/config precedence, and the output-root environment variable.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn comaml() -> Command {
    Command::new(env!("CARGO_BIN_EXE_comaml"))
}

/// Partial config: a 2-concept family small enough for tests to train in
/// milliseconds; unspecified keys take their defaults.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "family": {"n_concepts": 2, "n_classes": 12, "train_classes": 6,
             "val_classes": 3, "test_classes": 3, "seed": 77},
  "train": {"iterations": 2, "n_way": 2, "k_shot": 2, "q_query": 3,
            "hidden": 8, "embed_dim": 4, "per_concept_dim": 4, "concepts": 2,
            "adaptation": {"tasks_per_batch": 2},
            "schedule": {"lambda0": 1.0, "lambda_min": 0.1, "horizon": 2},
            "val_every": 2, "val_episodes": 4},
  "eval_episodes": 8,
  "seed": 5
}"#,
    )
    .unwrap();
    path
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// The artifact directory `train` reports on stdout.
fn artifact_dir(output: &Output) -> PathBuf {
    let stdout = stdout_of(output);
    let line = stdout
        .lines()
        .find(|l| l.starts_with("artifacts in "))
        .unwrap_or_else(|| panic!("no artifacts line in: {stdout}"));
    PathBuf::from(line.trim_start_matches("artifacts in "))
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let config = write_tiny_config(dir);
    comaml()
        .args(["train", "--config", config.to_str().unwrap(), "--out-root", dir.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn train_writes_artifacts_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(dir.path(), &["--algorithm", "protonet"]);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let run_dir = artifact_dir(&output);
    for name in ["config.json", "metrics.ldjson", "checkpoint.json", "result.json"] {
        assert!(run_dir.join(name).exists(), "{name} missing in {}", run_dir.display());
    }
    let stdout = stdout_of(&output);
    assert!(stdout.contains("protonet test: accuracy"), "{stdout}");
    assert!(stdout.contains("config "), "hash line missing: {stdout}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(dir.path(), &["--algorithm", "protonet", "--seed", "99"]);
    assert_eq!(output.status.code(), Some(0));
    let written = std::fs::read_to_string(artifact_dir(&output).join("config.json")).unwrap();
    assert!(written.contains("\"seed\": 99"), "{written}");
}

#[test]
fn unknown_algorithm_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(dir.path(), &["--algorithm", "mamml"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("mamml"));
}

#[test]
fn divergence_exits_three_and_leaves_a_flagged_record() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(
        dir.path(),
        &["--algorithm", "maml", "--inner-lr", "1e250", "--inner-steps", "2"],
    );
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    // the partial record is in the run directory under the output root
    let runs = dir.path().join("runs");
    let run_dir = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("maml-"))
        .expect("run directory exists");
    let record = std::fs::read_to_string(run_dir.join("result.json")).unwrap();
    assert!(record.contains("\"diverged\""), "{record}");
}

#[test]
fn eval_reuses_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(dir.path(), &["--algorithm", "protomaml"]);
    assert_eq!(output.status.code(), Some(0));
    let checkpoint = artifact_dir(&output).join("checkpoint.json");

    let eval = comaml()
        .args(["eval", checkpoint.to_str().unwrap(), "--split", "val", "--episodes", "4"])
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let stdout = stdout_of(&eval);
    assert!(stdout.contains("protomaml val: accuracy"), "{stdout}");
    assert!(checkpoint.parent().unwrap().join("eval-val.json").exists());

    let bad_split = comaml()
        .args(["eval", checkpoint.to_str().unwrap(), "--split", "holdout"])
        .output()
        .unwrap();
    assert_eq!(bad_split.status.code(), Some(2));
}

#[test]
fn sweep_writes_the_sensitivity_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let output = comaml()
        .args([
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--out-root",
            dir.path().to_str().unwrap(),
            "--algorithm",
            "comaml-static",
            "--concepts",
            "1,2",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = stdout_of(&output);
    assert!(stdout.contains("c=1:"), "{stdout}");
    assert!(stdout.contains("c=2:"), "{stdout}");
    let csv_line = stdout.lines().find(|l| l.starts_with("curve written to ")).unwrap();
    let csv = PathBuf::from(csv_line.trim_start_matches("curve written to "));
    let body = std::fs::read_to_string(csv).unwrap();
    assert!(body.starts_with("c,mean_accuracy,half_width\n"), "{body}");
    assert_eq!(body.lines().count(), 3);
}

#[test]
fn export_assignments_reports_purity() {
    let dir = tempfile::tempdir().unwrap();
    let output = train(dir.path(), &["--algorithm", "comaml-static"]);
    assert_eq!(output.status.code(), Some(0));
    let checkpoint = artifact_dir(&output).join("checkpoint.json");

    let export = comaml()
        .args(["export-assignments", checkpoint.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(export.status.code(), Some(0), "{}", String::from_utf8_lossy(&export.stderr));
    let stdout = stdout_of(&export);
    assert!(stdout.contains("static assignment"), "{stdout}");
    assert!(stdout.contains("purity"), "{stdout}");
    let parent = checkpoint.parent().unwrap();
    assert!(parent.join("assignments.csv").exists());
    assert!(parent.join("assignments.report.json").exists());

    // a checkpoint without a generator cannot be exported
    let protonet = train(dir.path(), &["--algorithm", "protonet"]);
    let bare = artifact_dir(&protonet).join("checkpoint.json");
    let refused =
        comaml().args(["export-assignments", bare.to_str().unwrap()]).output().unwrap();
    assert_eq!(refused.status.code(), Some(2));
}

#[test]
fn compare_renders_a_marked_table() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), &["--algorithm", "protonet"]);
    let b = train(dir.path(), &["--algorithm", "comaml-static"]);
    let ra = artifact_dir(&a).join("result.json");
    let rb = artifact_dir(&b).join("result.json");

    let csv_out = dir.path().join("table.csv");
    let output = comaml()
        .args([
            "compare",
            ra.to_str().unwrap(),
            rb.to_str().unwrap(),
            "--csv-out",
            csv_out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = stdout_of(&output);
    assert!(stdout.contains("protonet"), "{stdout}");
    assert!(stdout.contains("comaml-static"), "{stdout}");
    assert!(stdout.contains('*'), "best cell marked: {stdout}");
    assert!(csv_out.exists());
}

#[test]
fn environment_variable_sets_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let root = dir.path().join("env-root");
    let output = comaml()
        .args(["train", "--config", config.to_str().unwrap(), "--algorithm", "protonet"])
        .env("COMAML_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let run_dir = artifact_dir(&output);
    assert!(run_dir.starts_with(&root), "{} not under {}", run_dir.display(), root.display());
    assert!(run_dir.join("result.json").exists());
}
