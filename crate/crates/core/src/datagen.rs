//! Synthetic data, client partitioning and CSV datasets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Per-class noise scale of the synthetic generators.
pub const BLOB_SIGMA: f64 = 1.0;
pub const DEFAULT_DIRICHLET_CONCENTRATION: f64 = 0.5;
/// Redraw budget when a Dirichlet split leaves a client empty.
pub const MAX_DIRICHLET_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters with means on a sphere.
    GaussianBlobs,
    /// Interleaved half-circles, two per horizontal slot.
    TwoMoonsLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be at least 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("data.samples_per_class", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("data.input_dim", "must be at least 1"));
        }
        if self.kind == SyntheticKind::TwoMoonsLike && self.input_dim < 2 {
            return Err(Error::config("data.input_dim", "two_moons_like needs at least 2 dimensions"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("data.class_separation", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    IidEqual,
    Dirichlet,
}

fn default_concentration() -> f64 {
    DEFAULT_DIRICHLET_CONCENTRATION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_clients: usize,
    #[serde(default = "default_concentration")]
    pub dirichlet_concentration: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return Err(Error::config("partition.dirichlet_concentration", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Vec<ClientDataset>> {
        self.validate()?;
        match self.kind {
            PartitionKind::IidEqual => partition_iid(dataset, self.num_clients, self.seed),
            PartitionKind::Dirichlet => {
                partition_dirichlet(dataset, self.num_clients, self.dirichlet_concentration, self.seed)
            }
        }
    }
}

/// Blob centres on the sphere of radius `class_separation`.
///
/// Up to `2 · input_dim` classes sit on the signed coordinate axes; in two
/// dimensions they are spread evenly around the circle instead. Any further
/// classes get seeded random directions.
pub fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let (k, d, r) = (spec.num_classes, spec.input_dim, spec.class_separation);
    let mut rng = rng::stream(spec.seed, &[tag::SYNTH_MEANS]);
    (0..k)
        .map(|c| {
            let mut mean = vec![0.0; d];
            if d == 2 {
                let angle = std::f64::consts::TAU * c as f64 / k as f64;
                mean[0] = r * angle.cos();
                mean[1] = r * angle.sin();
            } else if c < 2 * d {
                mean[c % d] = if c < d { r } else { -r };
            } else {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                mean.iter_mut().zip(dir).for_each(|(m, v)| *m = r * v / norm);
            }
            mean
        })
        .collect()
}

fn draw_samples<R: Rng>(spec: &SyntheticSpec, means: &[Vec<f64>], per_class: usize, rng: &mut R) -> Result<Dataset> {
    let d = spec.input_dim;
    let mut features = Vec::with_capacity(spec.num_classes * per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            match spec.kind {
                SyntheticKind::GaussianBlobs => {
                    features.extend(mean.iter().map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + BLOB_SIGMA * z
                    }));
                }
                SyntheticKind::TwoMoonsLike => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let (x, y) = if c % 2 == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let slot = (c / 2) as f64 * 3.0;
                    let s = spec.class_separation;
                    let z0: f64 = StandardNormal.sample(rng);
                    let z1: f64 = StandardNormal.sample(rng);
                    features.push(s * (x + slot) + BLOB_SIGMA * z0);
                    features.push(s * y + BLOB_SIGMA * z1);
                    for _ in 2..d {
                        let z: f64 = StandardNormal.sample(rng);
                        features.push(BLOB_SIGMA * z);
                    }
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(d, spec.num_classes, features, labels)
}

/// Class-balanced synthetic samples, grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = rng::stream(spec.seed, &[tag::SYNTH_TRAIN]);
    draw_samples(spec, &means, spec.samples_per_class, &mut rng)
}

/// Training set as [`generate_synthetic`] plus an independent test set of
/// `test_per_class` samples per class from the same class distributions.
pub fn generate_synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let train = generate_synthetic(spec)?;
    if test_per_class == 0 {
        return Err(Error::config("data.test_samples_per_class", "must be at least 1"));
    }
    let means = class_means(spec);
    let mut rng = rng::stream(spec.seed, &[tag::SYNTH_TEST]);
    let test = draw_samples(spec, &means, test_per_class, &mut rng)?;
    Ok((train, test))
}

/// Per-feature affine map onto [0, 1], fitted on one dataset and applied to
/// others. Constant features map to 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.input_dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in data.features().chunks_exact(d) {
            for j in 0..d {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        Self { lo, hi }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let d = data.input_dim();
        if d != self.lo.len() {
            return Err(Error::DimensionMismatch {
                what: "scaler feature dimension",
                expected: self.lo.len(),
                actual: d,
            });
        }
        let features = data
            .features()
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter().enumerate().map(|(j, &x)| {
                    let span = self.hi[j] - self.lo[j];
                    if span > 0.0 {
                        (x - self.lo[j]) / span
                    } else {
                        0.5
                    }
                })
            })
            .collect();
        Dataset::new(d, data.num_classes(), features, data.labels().to_vec())
    }
}

fn indices_by_class(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::PARTITION]));
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for i in order {
        by_class[dataset.labels()[i]].push(i);
    }
    by_class
}

fn into_clients(dataset: &Dataset, assignment: Vec<Vec<usize>>) -> Vec<ClientDataset> {
    assignment
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.sort_unstable();
            ClientDataset::new(id, dataset.select(&idx))
        })
        .collect()
}

/// Shuffles, then deals each class round-robin across clients. The deal
/// pointer carries over between classes, so sizes differ by at most one and
/// every class is spread evenly.
pub fn partition_iid(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::config("partition.num_clients", "must be at least 1"));
    }
    if num_clients > dataset.len() {
        return Err(Error::config(
            "partition.num_clients",
            format!("{num_clients} clients for only {} samples", dataset.len()),
        ));
    }
    let mut assignment = vec![Vec::new(); num_clients];
    let mut next = 0;
    for class in indices_by_class(dataset, seed) {
        for i in class {
            assignment[next].push(i);
            next = (next + 1) % num_clients;
        }
    }
    Ok(into_clients(dataset, assignment))
}

/// Splits `total` items by `proportions` with largest-remainder rounding;
/// remainder ties go to the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample_dirichlet<R: Rng>(n: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::param("dirichlet_concentration", e.to_string()))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // Every gamma draw underflowed; put the class on one random client.
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        Ok(p)
    }
}

/// Label-skewed split: for each class `k`, `P_k ~ Dir_N(concentration)` and
/// client `i` receives a `P_{k,i}` share of that class (largest-remainder
/// rounding). A draw that leaves some client empty is discarded and redone
/// with the next seed.
pub fn partition_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::config("partition.num_clients", "must be at least 1"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::config("partition.dirichlet_concentration", "must be finite and > 0"));
    }
    if num_clients > dataset.len() {
        return Err(Error::config(
            "partition.num_clients",
            format!("{num_clients} clients for only {} samples", dataset.len()),
        ));
    }
    for attempt in 0..MAX_DIRICHLET_REDRAWS {
        let attempt_seed = seed.wrapping_add(attempt);
        let by_class = indices_by_class(dataset, attempt_seed);
        let mut rng = rng::stream(attempt_seed, &[tag::PARTITION, 1]);
        let mut assignment = vec![Vec::new(); num_clients];
        for class in &by_class {
            let p = sample_dirichlet(num_clients, concentration, &mut rng)?;
            let counts = largest_remainder(class.len(), &p);
            let mut start = 0;
            for (client, &count) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&class[start..start + count]);
                start += count;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            return Ok(into_clients(dataset, assignment));
        }
    }
    Err(Error::Numerical(format!(
        "no Dirichlet split without empty clients after {MAX_DIRICHLET_REDRAWS} draws"
    )))
}

/// Holds out `fraction` of each class (seeded) as a test set.
pub fn split_holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("data.test_fraction", "must lie strictly between 0 and 1"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in indices_by_class(dataset, seed ^ 0x5eed) {
        let k = (class.len() as f64 * fraction).round() as usize;
        test.extend_from_slice(&class[..k]);
        train.extend_from_slice(&class[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyData("holdout split left one side empty".into()));
    }
    Ok((dataset.select(&train), dataset.select(&test)))
}

/// Formats a float with 17 significant digits, enough to round-trip f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Reads `features..., label` rows (no header). Errors name the 1-based row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |row: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        reason,
    };

    let mut width: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(row, format!("expected at least 2 columns, found {}", record.len())));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(row, format!("expected {w} columns, found {}", record.len())));
            }
            _ => {}
        }
        let fields: Vec<&str> = record.iter().collect();
        let (label_field, feature_fields) = fields.split_last().expect("checked above");
        for (col, field) in feature_fields.iter().enumerate() {
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(row, format!("column {}: `{field}` is not a number", col + 1)))?;
            if !value.is_finite() {
                return Err(parse_err(row, format!("column {}: non-finite value", col + 1)));
            }
            features.push(value);
        }
        let label: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(row, format!("label `{label_field}` is not a non-negative integer")))?;        labels.push(label);
    }
    let Some(width) = width else {
        return Err(Error::EmptyData(format!("{} contains no rows", path.display())));
    };
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(width - 1, num_classes, features, labels)
}

/// Writes a dataset in the format [`load_csv`] reads.
pub fn write_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for i in 0..dataset.len() {
        let mut line: Vec<String> = dataset.row(i).iter().map(|&x| format_f64(x)).collect();
        line.push(dataset.labels()[i].to_string());
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
