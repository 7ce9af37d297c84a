//! Result files: per-round CSVs, a JSON summary and the sweep table.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::datagen::format_f64;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, ExperimentOutcome, SweepPoint};
use crate::federation::RoundRecord;
use crate::model::ModelArch;

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Column names of `rounds.csv` for `n` clients.
pub fn rounds_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["round", "selected", "aggregation_skipped", "train_loss", "test_loss", "test_accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n).map(|i| format!("alpha_{i}")));
    h.extend((0..n).map(|i| format!("loss_{i}")));
    h
}

/// One row per record. Selected ids are `;`-separated; metrics that were
/// not evaluated that round are empty.
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let n = records.first().map_or(0, |r| r.alpha.len());
    let mut w = writer(path)?;
    w.write_record(rounds_header(n))?;
    for r in records {
        let selected = r.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let mut row = vec![
            r.round.to_string(),
            selected,
            r.aggregation_skipped.to_string(),
            opt(r.train_loss),
            opt(r.test_loss),
            opt(r.test_accuracy),
        ];
        row.extend(r.alpha.iter().copied().map(format_f64));
        row.extend(r.cached_losses.iter().copied().map(format_f64));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `round, alpha_0, …` for every record.
pub fn write_weights_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let n = records.first().map_or(0, |r| r.alpha.len());
    let mut w = writer(path)?;
    let mut header = vec!["round".to_string()];
    header.extend((0..n).map(|i| format!("alpha_{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.round.to_string()];
        row.extend(r.alpha.iter().copied().map(format_f64));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct Resolved<'a> {
    lambda: f64,
    total_samples: usize,
    num_clients: usize,
    clients_per_round: usize,
    sample_counts: Vec<usize>,
    corrupted_clients: Vec<usize>,
    arch: &'a ModelArch,
    param_count: usize,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    resolved: Resolved<'a>,
    final_round: &'a RoundRecord,
}

pub fn write_summary(path: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    let p = &outcome.prepared;
    let summary = Summary {
        config,
        resolved: Resolved {
            lambda: p.federation.lambda,
            total_samples: p.total_samples,
            num_clients: p.clients.len(),
            clients_per_round: p.federation.clients_per_round,
            sample_counts: p.sample_counts(),
            corrupted_clients: p.corrupted_clients(),
            arch: &p.arch,
            param_count: p.arch.param_count(),
        },
        final_round: outcome.final_record(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `weights.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rounds_csv(&dir.join("rounds.csv"), &outcome.records)?;
    write_weights_csv(&dir.join("weights.csv"), &outcome.records)?;
    write_summary(&dir.join("summary.json"), config, outcome)
}

pub fn write_sweep_table(path: &Path, points: &[SweepPoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = points.first().map_or(0, |p| p.final_alpha.len());
    let mut w = writer(path)?;
    let mut header = vec!["lambda_multiple".to_string(), "lambda".into(), "final_test_accuracy".into()];
    header.extend((0..n).map(|i| format!("alpha_{i}")));
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![format_f64(p.lambda_multiple), format_f64(p.lambda), opt(p.final_test_accuracy)];
        row.extend(p.final_alpha.iter().copied().map(format_f64));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
