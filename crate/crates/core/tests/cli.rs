use std::path::Path;
use std::process::{Command, Output};

fn beacon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beacon")).args(args).output().expect("spawn beacon")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "hyper": {"epochs": 3},
  "benchmark": {"m_per_source": 40},
  "run": {"learner": {"embed_dim": 4}}
}"#;

#[test]
fn train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let result = beacon(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--log-weights", "full"]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    for name in ["metrics.csv", "weights.jsonl", "summary.json"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    assert!(out.join("checkpoints").read_dir().unwrap().next().is_some());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert_eq!(stdout.lines().count(), 4);
}

#[test]
fn bench_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("out");
    let result = beacon(&["bench", "--config", &config, "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    // 4 methods x 2 seeds x 3 epochs
    assert_eq!(csv.lines().count(), 1 + 24);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for text in [r#"{"hyper": {"lambda_d": -1}}"#, r#"{"hyper": {"lambda_x": 1}}"#, "not json"] {
        let config = write(dir.path(), "bad.json", text);
        let result = beacon(&["train", "--config", &config, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(result.status.code(), Some(1), "{text}");
    }
    let result = beacon(&["train"]);
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn negative_lambda_d_error_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.json", r#"{"hyper": {"lambda_d": -1}}"#);
    let result = beacon(&["train", "--config", &config]);
    assert!(String::from_utf8_lossy(&result.stderr).contains("lambda_d"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let result = beacon(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));

    // a single target row cannot be normalized by within-target distances
    let source = write(dir.path(), "s.csv", "x0\n1.0\n");
    let target = write(dir.path(), "t.csv", "x0\n0.0\n");
    let result = beacon(&["discrepancy", "--estimator", "knn", "--source", &source, "--target", &target]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn discrepancy_knn_prints_scores() {
    let dir = tempfile::tempdir().unwrap();
    let source = write(dir.path(), "s.csv", "x0,y0\n0.5,1\n3.0,1\n0.0,1\n");
    let target = write(dir.path(), "t.csv", "x0,y0\n0.0,0\n1.0,0\n");
    let result = beacon(&["discrepancy", "--estimator", "knn", "--source", &source, "--target", &target, "--k", "1"]);
    assert_eq!(result.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&result.stdout), "index,d\n0,0.5\n1,2\n2,0\n");
}

#[test]
fn discrepancy_classifier_and_localized_report_aux() {
    let dir = tempfile::tempdir().unwrap();
    let source = write(dir.path(), "s.csv", "x0,x1,y\n5,5,1\n6,5,1\n5,6,2\n");
    let target = write(dir.path(), "t.csv", "x0,x1,y\n0,0,0\n1,0,0.5\n0,1,0\n");
    let result = beacon(&["discrepancy", "--estimator", "classifier", "--source", &source, "--target", &target]);
    assert_eq!(result.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.lines().last().unwrap().starts_with("aux,"));

    let result = beacon(&["discrepancy", "--estimator", "localized", "--source", &source, "--target", &target]);
    assert_eq!(result.status.code(), Some(1));
    let result = beacon(&[
        "discrepancy", "--estimator", "localized", "--source", &source, "--target", &target, "--radius", "0.5",
    ]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    assert_eq!(String::from_utf8_lossy(&result.stdout).lines().count(), 1 + 3 + 1);
}

#[test]
fn sweep_selects_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "c.json", SMALL);
    let grids = write(dir.path(), "g.json", r#"{"lambda_d": [0.1], "alpha": [0.4, 0.45]}"#);
    let out = dir.path().join("out");
    let result = beacon(&[
        "sweep", "--config", &config, "--order", "lambda_d,alpha", "--grids", &grids, "--seeds", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.starts_with("lambda_d = 0.1\nalpha = "));
    assert!(out.join("sweep.json").exists());

    let result = beacon(&["sweep", "--config", &config, "--order", "bogus", "--grids", &grids]);
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn check_projections_reports_small_error() {
    let result = beacon(&["check-projections", "--instances", "10"]);
    assert_eq!(result.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&result.stdout);
    let last = stdout.lines().last().unwrap();
    let value: f64 = last.trim_start_matches("max error ").parse().unwrap();
    assert!(value < 1e-3, "{stdout}");
}
