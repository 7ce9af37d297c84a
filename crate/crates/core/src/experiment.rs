//! JSON experiment configs and the end-to-end pipeline:
//! data → partition → corruption → federation → exported metrics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationRule;
use crate::corrupt::{apply_corruption, CorruptionSpec, Scenario, DEFAULT_NOISE_SIGMA};
use crate::datagen::{
    generate_synthetic_split, load_csv, split_holdout, MinMaxScaler, PartitionKind, PartitionSpec,
    SyntheticKind, SyntheticSpec, DEFAULT_DIRICHLET_CONCENTRATION,
};
use crate::dataset::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::export;
use crate::federation::{FederationConfig, RoundRecord, Simulation};
use crate::model::{ModelArch, TrainConfig};

fn yes() -> bool {
    true
}

fn default_lambda_multiple() -> f64 {
    1.0
}

fn default_eval_interval() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_concentration() -> f64 {
    DEFAULT_DIRICHLET_CONCENTRATION
}

fn default_noise_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        kind: SyntheticKind,
        num_classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        input_dim: usize,
        class_separation: f64,
        /// Min-max scale features onto [0, 1] using training-set ranges.
        #[serde(default = "yes")]
        normalize: bool,
    },
    Csv {
        train_path: PathBuf,
        /// Without a test file, `test_fraction` of the training rows is held out.
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub num_clients: usize,
    #[serde(default = "default_concentration")]
    pub dirichlet_concentration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub fraction: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Clean,
            fraction: 0.0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Logistic,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub corruption: u64,
    #[serde(default)]
    pub training: u64,
}

fn default_rule() -> AggregationRule {
    AggregationRule::Arfl
}

/// One experiment, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    #[serde(default = "default_rule")]
    pub rule: AggregationRule,
    pub rounds: u64,
    /// |S_t|; all clients when absent.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    /// λ as a multiple of the total training sample count M.
    #[serde(default = "default_lambda_multiple")]
    pub lambda_multiple: f64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// λ multiples for `sweep` when none are given on the command line.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub parallel: bool,
}

/// Parses and validates a JSON config. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path.is_empty() || path == "." { "<root>".to_string() } else { path };
        Error::config(key, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    /// Checks every constraint that does not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Synthetic {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                input_dim,
                class_separation,
                ..
            } => {
                if *num_classes < 2 {
                    return Err(Error::config("data.num_classes", "must be at least 2"));
                }
                if *samples_per_class == 0 {
                    return Err(Error::config("data.samples_per_class", "must be at least 1"));
                }
                if *test_samples_per_class == 0 {
                    return Err(Error::config("data.test_samples_per_class", "must be at least 1"));
                }
                if *input_dim == 0 {
                    return Err(Error::config("data.input_dim", "must be at least 1"));
                }
                positive("data.class_separation", *class_separation)?;
            }
            DataConfig::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::config("data.test_fraction", "must lie strictly between 0 and 1"));
                }
            }
        }
        if self.partition.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        positive("partition.dirichlet_concentration", self.partition.dirichlet_concentration)?;
        if !(0.0..=1.0).contains(&self.corruption.fraction) {
            return Err(Error::config("corruption.fraction", "must lie in [0, 1]"));
        }
        positive("corruption.noise_sigma", self.corruption.noise_sigma)?;
        if let ModelConfig::Mlp { hidden_dim: 0 } = self.model {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        self.rule
            .validate()
            .map_err(|e| Error::config("rule", e.to_string()))?;
        if self.clients_per_round == Some(0) {
            return Err(Error::config("clients_per_round", "must be at least 1"));
        }
        positive("lambda_multiple", self.lambda_multiple)?;
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::config("lambda_grid", "must not be empty"));
            }
            for &v in grid {
                positive("lambda_grid", v)?;
            }
        }
        Ok(())
    }

    /// Applies a `name=value` seed override (`data`, `corruption` or `training`).
    pub fn apply_seed_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config("seed-override", format!("expected name=value, got `{spec}`")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("seeds.{}", key.trim()), format!("`{value}` is not a u64")))?;
        match key.trim() {
            "data" => self.seeds.data = value,
            "corruption" => self.seeds.corruption = value,
            "training" => self.seeds.training = value,
            other => return Err(Error::config(format!("seeds.{other}"), "unknown seed name")),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything the federation needs, built from a config.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub clients: Vec<ClientDataset>,
    pub test: Dataset,
    pub arch: ModelArch,
    pub federation: FederationConfig,
    /// Total training samples M.
    pub total_samples: usize,
}

impl PreparedExperiment {
    pub fn sample_counts(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::sample_count).collect()
    }

    pub fn corrupted_clients(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| c.is_corrupted)
            .map(|c| c.client_id)
            .collect()
    }
}

fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let seed = config.seeds.data;
    let (train, test, normalize) = match &config.data {
        DataConfig::Synthetic {
            kind,
            num_classes,
            samples_per_class,
            test_samples_per_class,
            input_dim,
            class_separation,
            normalize,
        } => {
            let spec = SyntheticSpec {
                kind: *kind,
                num_classes: *num_classes,
                samples_per_class: *samples_per_class,
                input_dim: *input_dim,
                class_separation: *class_separation,
                seed,
            };
            let (train, test) = generate_synthetic_split(&spec, *test_samples_per_class)?;
            (train, test, *normalize)
        }
        DataConfig::Csv {
            train_path,
            test_path,
            test_fraction,
            normalize,
        } => {
            let all = load_csv(train_path)?;
            let (train, test) = match test_path {
                Some(p) => (all, load_csv(p)?),
                None => split_holdout(&all, *test_fraction, seed)?,
            };
            (train, test, *normalize)
        }
    };
    if train.input_dim() != test.input_dim() {
        return Err(Error::config("data.test_path", "test features differ in dimension from training features"));
    }
    if normalize {
        let scaler = MinMaxScaler::fit(&train);
        Ok((scaler.transform(&train)?, scaler.transform(&test)?))
    } else {
        Ok((train, test))
    }
}

/// Loads or generates data, partitions it, injects corruption and resolves
/// λ and the model architecture.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    config.validate()?;
    let (train, test) = load_data(config)?;
    let partition = PartitionSpec {
        kind: config.partition.kind,
        num_clients: config.partition.num_clients,
        dirichlet_concentration: config.partition.dirichlet_concentration,
        seed: config.seeds.data,
    };
    let clean = partition.apply(&train)?;
    let corruption = CorruptionSpec {
        scenario: config.corruption.scenario,
        fraction: config.corruption.fraction,
        noise_sigma: config.corruption.noise_sigma,
        seed: config.seeds.corruption,
    };
    let clients = apply_corruption(&clean, &corruption)?;

    let input_dim = train.input_dim();
    let num_classes = train.num_classes().max(test.num_classes());
    let arch = match config.model {
        ModelConfig::Logistic => ModelArch::Logistic {
            input_dim,
            num_classes,
        },
        ModelConfig::Mlp { hidden_dim } => ModelArch::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        },
    };
    let total_samples = train.len();
    let federation = FederationConfig {
        train: TrainConfig {
            learning_rate: config.train.learning_rate,
            local_epochs: config.train.local_epochs,
            batch_size: config.train.batch_size,
            seed: config.seeds.training,
        },
        rule: config.rule,
        clients_per_round: config.clients_per_round.unwrap_or(clients.len()),
        lambda: config.lambda_multiple * total_samples as f64,
        parallel: config.parallel,
    };
    federation.validate(clients.len())?;
    Ok(PreparedExperiment {
        clients,
        test,
        arch,
        federation,
        total_samples,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub prepared: PreparedExperiment,
    pub records: Vec<RoundRecord>,
}

impl ExperimentOutcome {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("at least the initialization record")
    }
}

/// Runs a prepared federation for `rounds` rounds.
pub fn run_prepared(prepared: &PreparedExperiment, rounds: u64, eval_interval: u64) -> Result<Vec<RoundRecord>> {
    let mut sim = Simulation::new(
        &prepared.clients,
        Some(&prepared.test),
        prepared.arch,
        prepared.federation,
        eval_interval,
    )?;
    sim.run(rounds)
}

/// Runs an experiment in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prepared = prepare(config)?;
    let records = run_prepared(&prepared, config.rounds, config.eval_interval)?;
    Ok(ExperimentOutcome { prepared, records })
}

/// Runs an experiment and writes `rounds.csv`, `weights.csv` and
/// `summary.json` into `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let outcome = run_experiment(config)?;
    export::write_outputs(&config.output_dir, config, &outcome)?;
    Ok(outcome)
}

/// One λ point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda_multiple: f64,
    pub lambda: f64,
    pub final_test_accuracy: Option<f64>,
    pub final_alpha: Vec<f64>,
    pub output_dir: PathBuf,
}

/// Output directory name for one sweep point.
pub fn sweep_dir_name(lambda_multiple: f64) -> String {
    format!("lambda_{lambda_multiple}")
}

/// Runs `config` once per λ multiple, sharing data and corruption seeds.
/// Each point writes its usual files under `output_dir/lambda_<value>/`,
/// and the table of results goes to `output_dir/sweep.csv`.
pub fn sweep(config: &ExperimentConfig, lambda_grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if lambda_grid.is_empty() {
        return Err(Error::config("lambda_grid", "must not be empty"));
    }
    let mut points = Vec::with_capacity(lambda_grid.len());
    for &multiple in lambda_grid {
        let mut point_config = config.clone();
        point_config.lambda_multiple = multiple;
        point_config.lambda_grid = None;
        point_config.output_dir = config.output_dir.join(sweep_dir_name(multiple));
        let outcome = run(&point_config)?;
        let last = outcome.final_record();
        points.push(SweepPoint {
            lambda_multiple: multiple,
            lambda: outcome.prepared.federation.lambda,
            final_test_accuracy: last.test_accuracy,
            final_alpha: last.alpha.clone(),
            output_dir: point_config.output_dir,
        });
    }
    export::write_sweep_table(&config.output_dir.join("sweep.csv"), &points)?;
    Ok(points)
}
