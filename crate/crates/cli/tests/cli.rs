use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"{
    "data": {"source": "synthetic", "kind": "gaussian_blobs", "num_classes": 3,
             "samples_per_class": 30, "test_samples_per_class": 10,
             "input_dim": 4, "class_separation": 4.0},
    "partition": {"kind": "dirichlet", "num_clients": 5},
    "corruption": {"scenario": "flipping", "fraction": 0.4},
    "model": {"kind": "mlp", "hidden_dim": 8},
    "train": {"learning_rate": 0.1, "local_epochs": 1, "batch_size": 16},
    "rounds": 4,
    "seeds": {"data": 1, "corruption": 2, "training": 3}
}"#;

fn arfl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_arfl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let status = arfl(&["run", &config, "--output-dir", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let rounds = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 5);
    let weights = fs::read_to_string(out.join("weights.csv")).unwrap();
    for line in weights.lines().skip(1) {
        let total: f64 = line.split(',').skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["lambda_multiple"], 1.0);
    assert_eq!(summary["config"]["eval_interval"], 1);
    assert_eq!(summary["config"]["seeds"]["training"], 3);
    assert_eq!(summary["resolved"]["total_samples"], 90);
    assert_eq!(summary["resolved"]["lambda"], 90.0);
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(arfl(&["run", &config, "--output-dir", a.to_str().unwrap()]).status.success());
    assert!(arfl(&["run", &config, "--output-dir", b.to_str().unwrap()]).status.success());
    assert!(arfl(&["run", &config, "--output-dir", c.to_str().unwrap(), "--seed-override", "training=99"])
        .status
        .success());
    let read = |p: &Path| fs::read(p.join("rounds.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let summary = fs::read_to_string(c.join("summary.json")).unwrap();
    assert!(summary.contains("\"training\": 99"));
}

#[test]
fn sweep_writes_table_and_subdirs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let status = arfl(&["sweep", &config, "--lambda-grid", "0.1,10", "--output-dir", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(out.join("lambda_0.1").join("weights.csv").exists());
    assert!(out.join("lambda_10").join("weights.csv").exists());
}

#[test]
fn bad_config_fails_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &CONFIG.replace("\"rounds\": 4", "\"rounds\": -1"));
    let out = arfl(&["run", &config]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));
}

#[test]
fn missing_file_and_grid_fail() {
    let out = arfl(&["run", "/nonexistent/config.json"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = arfl(&["sweep", &config]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        arfl::experiment::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen > 0);
}
