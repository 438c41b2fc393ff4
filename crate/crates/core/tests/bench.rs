use std::collections::BTreeMap;

use beacon::bench::{export_metrics, run_experiment, run_sweep, ShiftSpec};
use beacon::config::{Config, Method};
use beacon::{BeaconError, HyperParams};

fn small_config(epochs: usize) -> Config {
    let mut config = Config::default();
    config.hyper.epochs = epochs;
    config.benchmark = ShiftSpec { m_per_source: 60, ..ShiftSpec::default() };
    config.run.learner.embed_dim = 8;
    config
}

fn grids(entries: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
    entries.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
}

#[test]
fn repeated_method_gives_identical_rows() {
    let config = small_config(8);
    let report = run_experiment(&config, &[Method::TargetOnly, Method::TargetOnly], &[0]).unwrap();
    let (a, b) = (&report.rows[0], &report.rows[1]);
    assert_eq!(a.final_risk, b.final_risk);
    assert_eq!(a.report, b.report);
}

#[test]
fn all_methods_share_one_dataset() {
    let config = small_config(4);
    let report = run_experiment(&config, &Method::ALL, &[0]).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.dataset_hash == report.rows[0].dataset_hash));
    assert_eq!(report.rows[0].dataset_hash.len(), 64);
    let wins: usize = report.aggregate.iter().map(|a| a.wins).sum();
    assert_eq!(wins, 1);
}

#[test]
fn single_value_grid_is_selected() {
    let config = small_config(3);
    let report = run_sweep(&config, &["alpha".to_string()], &grids(&[("alpha", &[0.3])]), &[0, 1]).unwrap();
    assert_eq!(report.selected, vec![("alpha".to_string(), 0.3)]);
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.cells[0].risks.len(), 2);
    assert_eq!(report.final_hyper.alpha, 0.3);
}

#[test]
fn flat_landscape_returns_defaults_in_any_order() {
    // no epochs: every grid point leaves the initial learner untouched
    let config = small_config(0);
    let g = grids(&[("lambda1", &[0.001, 0.01, 0.1]), ("lambda2", &[0.1, 0.01, 0.005])]);
    let defaults = HyperParams::default();
    for order in [["lambda1", "lambda2"], ["lambda2", "lambda1"]] {
        let order: Vec<String> = order.iter().map(|s| s.to_string()).collect();
        let report = run_sweep(&config, &order, &g, &[0, 1]).unwrap();
        assert_eq!(report.final_hyper.lambda1, defaults.lambda1);
        assert_eq!(report.final_hyper.lambda2, defaults.lambda2);
    }
}

#[test]
fn ties_without_default_pick_smaller_value() {
    let config = small_config(0);
    let report = run_sweep(&config, &["alpha".to_string()], &grids(&[("alpha", &[0.3, 0.2])]), &[0]).unwrap();
    assert_eq!(report.selected[0].1, 0.2);
}

#[test]
fn unknown_field_is_rejected() {
    let config = small_config(1);
    let err = run_sweep(&config, &["nonsense".to_string()], &grids(&[("nonsense", &[1.0])]), &[0]).unwrap_err();
    assert!(matches!(err, BeaconError::UnknownField(ref f) if f == "nonsense"));
}

#[test]
fn discrepancy_weight_wins_on_fully_corrupted_sources() {
    let config = Config {
        benchmark: ShiftSpec { corrupt_fraction: vec![1.0], ..ShiftSpec::default() },
        ..Config::default()
    };
    let order = vec!["lambda_d".to_string()];
    let report = run_sweep(&config, &order, &grids(&[("lambda_d", &[0.0, 10.0])]), &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(report.selected[0].1, 10.0, "cells: {:?}", report.cells);
}

#[test]
fn export_one_epoch_one_method() {
    let config = small_config(1);
    let report = run_experiment(&config, &[Method::Beacon], &[0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_metrics(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("beacon,0,1,"));
    assert!(lines[1].split(',').all(|f| !f.is_empty()));
    let jsonl = std::fs::read_to_string(dir.path().join("weights.jsonl")).unwrap();
    // initial state plus one refresh
    assert_eq!(jsonl.lines().count(), 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary["aggregate"].as_array().is_some_and(|a| a.len() == 1));
}

#[test]
fn baselines_leave_weight_columns_empty() {
    let config = small_config(2);
    let report = run_experiment(&config, &[Method::TargetOnly], &[0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_metrics(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",,,,"), "{line}");
    }
}

#[test]
fn re_export_is_byte_identical() {
    let config = small_config(3);
    let report = run_experiment(&config, &[Method::Beacon, Method::BeaconMulti], &[0]).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export_metrics(&report, a.path()).unwrap();
    export_metrics(&report, b.path()).unwrap();
    for name in ["metrics.csv", "weights.jsonl", "summary.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
}
