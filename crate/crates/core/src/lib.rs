//! Deterministic simulator for federated learning with automatically
//! weighted clients, plus the standard robust aggregation baselines.
//!
//! The server keeps one loss per client and, each round, solves for client
//! weights that trade weighted training loss against a sample-normalized
//! quadratic penalty. Clients whose loss sits above a data-dependent
//! threshold receive zero weight.

pub mod aggregate;
pub mod corrupt;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod export;
pub mod federation;
pub mod model;
pub mod rng;
pub mod solver;

pub use aggregate::{AggregationRule, ClientContribution};
pub use corrupt::{CorruptionSpec, Scenario};
pub use datagen::{PartitionKind, PartitionSpec, SyntheticKind, SyntheticSpec};
pub use dataset::{ClientDataset, Dataset};
pub use error::{Error, Result};
pub use experiment::{parse_config, ExperimentConfig};
pub use federation::{FederationConfig, RoundRecord, ServerState, Simulation};
pub use model::{ModelArch, ParamVector, TrainConfig};
pub use solver::{solve_weights, SolverInput, SolverOutput, WeightVector};
