//! Data corruption injected into a subset of clients before training.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.7;

fn default_noise_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    /// Permute the labels of every sample.
    Shuffling,
    /// Force every label to one random class.
    Flipping,
    /// Add Gaussian feature noise, then rescale to [0, 1].
    Noisy,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::Shuffling => "shuffling",
            Scenario::Flipping => "flipping",
            Scenario::Noisy => "noisy",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Scenario::Clean),
            "shuffling" => Ok(Scenario::Shuffling),
            "flipping" => Ok(Scenario::Flipping),
            "noisy" => Ok(Scenario::Noisy),
            other => Err(Error::config("scenario", format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub scenario: Scenario,
    /// Fraction of clients corrupted; `round(fraction · N)` are picked.
    #[serde(default)]
    pub fraction: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        Self {
            scenario: Scenario::Clean,
            fraction: 0.0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config("corruption.fraction", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("corruption.noise_sigma", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Number of corrupted clients out of `n`.
    pub fn corrupted_count(&self, n: usize) -> usize {
        match self.scenario {
            Scenario::Clean => 0,
            _ => ((self.fraction * n as f64).round() as usize).min(n),
        }
    }
}

/// Labels replaced by a uniformly random permutation of themselves.
pub fn shuffle_labels<R: Rng + ?Sized>(data: &ClientDataset, rng: &mut R) -> ClientDataset {
    let mut out = data.clone();
    out.data.labels_mut().shuffle(rng);
    out
}

/// Every label replaced by one class drawn uniformly from `0..num_classes`.
pub fn flip_labels<R: Rng + ?Sized>(data: &ClientDataset, rng: &mut R, num_classes: usize) -> Result<ClientDataset> {
    if num_classes < 2 {
        return Err(Error::param("num_classes", "must be at least 2"));
    }
    let target = rng.random_range(0..num_classes);
    let mut out = data.clone();
    out.data.labels_mut().iter_mut().for_each(|y| *y = target);
    Ok(out)
}

/// `x ← x + ε`, `ε ~ N(0, σ²)` per entry, then min-max rescaling of the
/// whole client matrix back onto [0, 1]. A constant result maps to 0.5.
pub fn add_feature_noise<R: Rng + ?Sized>(data: &ClientDataset, sigma: f64, rng: &mut R) -> Result<ClientDataset> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param("noise_sigma", e.to_string()))?;
    let mut out = data.clone();
    let features = out.data.features_mut();
    for x in features.iter_mut() {
        *x += normal.sample(rng);
    }
    let (lo, hi) = features
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        for x in features.iter_mut() {
            *x = ((*x - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        features.iter_mut().for_each(|x| *x = 0.5);
    }
    Ok(out)
}

/// Ids of the clients `spec` corrupts, ascending. Depends only on the
/// corruption seed and `n`.
pub fn select_corrupted(n: usize, spec: &CorruptionSpec) -> Vec<usize> {
    let k = spec.corrupted_count(n);
    if k == 0 {
        return Vec::new();
    }
    let mut rng = rng::stream(spec.seed, &[tag::CORRUPT_SELECT]);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Corrupts `round(fraction · N)` clients according to `spec` and sets
/// their flags; everyone else is returned untouched with the flag cleared.
pub fn apply_corruption(datasets: &[ClientDataset], spec: &CorruptionSpec) -> Result<Vec<ClientDataset>> {
    if datasets.is_empty() {
        return Err(Error::EmptyData("no client datasets to corrupt".into()));
    }
    spec.validate()?;
    let chosen = select_corrupted(datasets.len(), spec);
    datasets
        .iter()
        .enumerate()
        .map(|(pos, client)| {
            if chosen.binary_search(&pos).is_err() {
                let mut out = client.clone();
                out.is_corrupted = false;
                return Ok(out);
            }
            let mut rng = rng::stream(spec.seed, &[tag::CORRUPT_CLIENT, client.client_id as u64]);
            let mut out = match spec.scenario {
                Scenario::Clean => client.clone(),
                Scenario::Shuffling => shuffle_labels(client, &mut rng),
                Scenario::Flipping => flip_labels(client, &mut rng, client.data.num_classes())?,
                Scenario::Noisy => add_feature_noise(client, spec.noise_sigma, &mut rng)?,
            };
            out.is_corrupted = true;
            Ok(out)
        })
        .collect()
}
