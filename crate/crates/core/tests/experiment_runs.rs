use std::fs;

use arfl::aggregate::AggregationRule;
use arfl::experiment::{parse_config, run, run_experiment, sweep, sweep_dir_name, ExperimentConfig};

fn base() -> ExperimentConfig {
    parse_config(
        r#"{
        "data": {"source": "synthetic", "kind": "gaussian_blobs", "num_classes": 3,
                 "samples_per_class": 60, "test_samples_per_class": 30,
                 "input_dim": 4, "class_separation": 4.0},
        "partition": {"kind": "iid_equal", "num_clients": 5},
        "model": {"kind": "logistic"},
        "train": {"learning_rate": 0.1, "local_epochs": 1, "batch_size": 16},
        "rounds": 40,
        "seeds": {"data": 3, "corruption": 4, "training": 5}
    }"#,
    )
    .unwrap()
}

#[test]
fn clean_fedavg_and_arfl_agree() {
    let mut accs = Vec::new();
    for rule in [AggregationRule::Fedavg, AggregationRule::Arfl] {
        let mut c = base();
        c.rule = rule;
        let out = run_experiment(&c).unwrap();
        accs.push(out.final_record().test_accuracy.unwrap());
    }
    assert!((accs[0] - accs[1]).abs() <= 0.02, "{accs:?}");
    assert!(accs[0] > 0.8);
}

#[test]
fn zero_rounds_give_initialization_record_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c.rounds = 0;
    c.output_dir = dir.path().to_path_buf();
    let out = run(&c).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].round, 0);
    assert!(out.records[0].test_accuracy.is_some());
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
    let weights = fs::read_to_string(dir.path().join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 2);
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c.rounds = 8;
    c.corruption.scenario = arfl::corrupt::Scenario::Noisy;
    c.corruption.fraction = 0.4;
    let mut outputs = Vec::new();
    for (name, parallel) in [("a", true), ("b", true), ("c", false)] {
        c.output_dir = dir.path().join(name);
        c.parallel = parallel;
        run(&c).unwrap();
        outputs.push(fs::read(c.output_dir.join("rounds.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn summary_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c.rounds = 2;
    c.output_dir = dir.path().to_path_buf();
    run(&c).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(echoed, c);
    assert_eq!(json["resolved"]["lambda"], 180.0);
    assert_eq!(json["final_round"]["round"], 2);
}

#[test]
fn sweep_of_one_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c.rounds = 5;
    c.lambda_multiple = 0.5;
    c.output_dir = dir.path().join("single");
    run(&c).unwrap();
    let single = fs::read(c.output_dir.join("rounds.csv")).unwrap();

    c.lambda_multiple = 1.0;
    c.output_dir = dir.path().join("sweep");
    let points = sweep(&c, &[0.5]).unwrap();
    assert_eq!(points.len(), 1);
    let swept = fs::read(c.output_dir.join(sweep_dir_name(0.5)).join("rounds.csv")).unwrap();
    assert_eq!(single, swept);
    assert!(c.output_dir.join("sweep.csv").exists());
}

#[test]
fn lambda_limits_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c.rounds = 5;
    c.partition.kind = arfl::datagen::PartitionKind::Dirichlet;
    c.output_dir = dir.path().to_path_buf();
    let points = sweep(&c, &[1e-6, 1e6]).unwrap();
    let prepared = arfl::experiment::prepare(&c).unwrap();
    let counts = prepared.sample_counts();
    let total = prepared.total_samples as f64;

    let tiny = &points[0].final_alpha;
    assert_eq!(tiny.iter().filter(|&&a| a > 0.0).count(), 1);
    assert!(tiny.contains(&1.0));

    let huge = &points[1].final_alpha;
    for (a, &m) in huge.iter().zip(&counts) {
        assert!((a - m as f64 / total).abs() < 1e-4);
    }
}
