//! Server-side aggregation rules.
//!
//! * ARFL: convex combination with the auto-computed weights, renormalized
//!   over the round's selected clients.
//! * FedAvg: sample-count weighted mean.
//! * RFA: weighted geometric median via smoothed Weiszfeld iterations.
//! * Multi-Krum: unweighted mean of the `m` updates with the smallest sum of
//!   squared distances to their `n − f − 2` nearest neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

pub const DEFAULT_RFA_EPSILON: f64 = 1e-6;
/// Weiszfeld converges sublinearly when the median sits on an update, so
/// the cap is generous; most runs stop early on the step tolerance.
pub const DEFAULT_RFA_MAX_ITERS: usize = 10_000;
/// Weiszfeld stops once consecutive iterates are closer than this.
pub const RFA_TOLERANCE: f64 = 1e-8;

fn default_rfa_epsilon() -> f64 {
    DEFAULT_RFA_EPSILON
}

fn default_rfa_max_iters() -> usize {
    DEFAULT_RFA_MAX_ITERS
}

/// Aggregation rule with its hyperparameters. Multi-Krum's `f` and `m`
/// default per round from the number of contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationRule {
    Arfl,
    Fedavg,
    Rfa {
        #[serde(default = "default_rfa_epsilon")]
        epsilon: f64,
        #[serde(default = "default_rfa_max_iters")]
        max_iters: usize,
    },
    Mkrum {
        #[serde(default)]
        f: Option<usize>,
        #[serde(default)]
        m: Option<usize>,
    },
}

impl AggregationRule {
    pub fn rfa() -> Self {
        AggregationRule::Rfa {
            epsilon: DEFAULT_RFA_EPSILON,
            max_iters: DEFAULT_RFA_MAX_ITERS,
        }
    }

    pub fn mkrum() -> Self {
        AggregationRule::Mkrum { f: None, m: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::Arfl => "arfl",
            AggregationRule::Fedavg => "fedavg",
            AggregationRule::Rfa { .. } => "rfa",
            AggregationRule::Mkrum { .. } => "mkrum",
        }
    }

    /// Checks rule parameters that do not depend on the round size.
    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationRule::Rfa { epsilon, max_iters } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::param("epsilon", "must be finite and > 0"));
                }
                if max_iters == 0 {
                    return Err(Error::param("max_iters", "must be at least 1"));
                }
            }
            AggregationRule::Mkrum { m: Some(0), .. } => {
                return Err(Error::param("m", "must be at least 1"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Applies the rule to one round's contributions.
    pub fn aggregate(&self, contribs: &[ClientContribution]) -> Result<ParamVector> {
        match *self {
            AggregationRule::Arfl => arfl_aggregate(contribs),
            AggregationRule::Fedavg => fedavg_aggregate(contribs),
            AggregationRule::Rfa { epsilon, max_iters } => rfa_aggregate(contribs, epsilon, max_iters),
            AggregationRule::Mkrum { f, m } => {
                let n = contribs.len();
                let f = f.unwrap_or_else(|| default_krum_f(n));
                let m = m.unwrap_or_else(|| n.saturating_sub(f + 2));
                mkrum_aggregate(contribs, f, m)
            }
        }
    }
}

/// `⌈0.3 n⌉`, capped at `n − 3`.
pub fn default_krum_f(n: usize) -> usize {
    let f = (3 * n).div_ceil(10);
    f.min(n.saturating_sub(3))
}

/// One selected client's upload for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientContribution {
    pub client_id: usize,
    pub params: ParamVector,
    pub sample_count: usize,
    /// Current auto-weight α_i; only the ARFL rule reads it.
    pub weight: f64,
}

fn check_shapes(contribs: &[ClientContribution]) -> Result<usize> {
    let first = contribs
        .first()
        .ok_or_else(|| Error::EmptyData("no contributions to aggregate".into()))?;
    let len = first.params.len();
    for c in contribs {
        if c.params.len() != len {
            return Err(Error::DimensionMismatch {
                what: "contributed parameter length",
                expected: len,
                actual: c.params.len(),
            });
        }
    }
    Ok(len)
}

/// Σ c_i w_i / Σ c_i, accumulated in contribution order.
fn weighted_mean(contribs: &[ClientContribution], coeffs: &[f64]) -> ParamVector {
    let len = contribs[0].params.len();
    let total: f64 = coeffs.iter().sum();
    let mut out = vec![0.0; len];
    for (c, &k) in contribs.iter().zip(coeffs) {
        let k = k / total;
        if k == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(c.params.as_slice()) {
            *o += k * v;
        }
    }
    ParamVector::new(out)
}

/// `w ← Σ_{i∈S} (α_i / Σ_{j∈S} α_j) w_i`.
pub fn arfl_aggregate(contribs: &[ClientContribution]) -> Result<ParamVector> {
    check_shapes(contribs)?;
    if let Some(c) = contribs.iter().find(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "client {} has invalid weight {}",
            c.client_id, c.weight
        )));
    }
    let weights: Vec<f64> = contribs.iter().map(|c| c.weight).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::ZeroMassRound);
    }
    Ok(weighted_mean(contribs, &weights))
}

pub fn fedavg_aggregate(contribs: &[ClientContribution]) -> Result<ParamVector> {
    check_shapes(contribs)?;
    let counts = sample_weights(contribs)?;
    Ok(weighted_mean(contribs, &counts))
}

fn sample_weights(contribs: &[ClientContribution]) -> Result<Vec<f64>> {
    if let Some(c) = contribs.iter().find(|c| c.sample_count == 0) {
        return Err(Error::InvalidInput(format!("client {} reports zero samples", c.client_id)));
    }
    Ok(contribs.iter().map(|c| c.sample_count as f64).collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_i (m_i / Σm) · max(ε, ‖v − w_i‖)`, the quantity smoothed Weiszfeld
/// drives down.
pub fn smoothed_median_objective(contribs: &[ClientContribution], v: &[f64], epsilon: f64) -> f64 {
    let total: f64 = contribs.iter().map(|c| c.sample_count as f64).sum();
    contribs
        .iter()
        .map(|c| c.sample_count as f64 / total * distance(v, c.params.as_slice()).max(epsilon))
        .sum()
}

/// Result of a Weiszfeld run, with every iterate for inspection.
#[derive(Debug, Clone)]
pub struct WeiszfeldTrace {
    pub point: ParamVector,
    /// Iterates `v^0` (the weighted mean) through the returned point.
    pub iterates: Vec<ParamVector>,
}

/// Smoothed Weiszfeld from the weighted mean:
/// `v ← Σ θ_i w_i / Σ θ_i` with `θ_i = (m_i/Σm) / max(ε, ‖v − w_i‖)`.
pub fn rfa_trace(contribs: &[ClientContribution], epsilon: f64, max_iters: usize) -> Result<WeiszfeldTrace> {
    check_shapes(contribs)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", "must be finite and > 0"));
    }
    let counts = sample_weights(contribs)?;
    let total: f64 = counts.iter().sum();
    let mut v = weighted_mean(contribs, &counts);
    let mut iterates = vec![v.clone()];
    let mut theta = vec![0.0; contribs.len()];
    for _ in 0..max_iters {
        for ((t, c), &m) in theta.iter_mut().zip(contribs).zip(&counts) {
            *t = (m / total) / distance(v.as_slice(), c.params.as_slice()).max(epsilon);
        }
        let next = weighted_mean(contribs, &theta);
        let step = distance(next.as_slice(), v.as_slice());
        v = next;
        iterates.push(v.clone());
        if step < RFA_TOLERANCE {
            break;
        }
    }
    Ok(WeiszfeldTrace { point: v, iterates })
}

pub fn rfa_aggregate(contribs: &[ClientContribution], epsilon: f64, max_iters: usize) -> Result<ParamVector> {
    rfa_trace(contribs, epsilon, max_iters).map(|t| t.point)
}

/// Krum scores: for each update, the sum of squared distances to its
/// `n − f − 2` nearest other updates.
pub fn krum_scores(contribs: &[ClientContribution], f: usize) -> Result<Vec<f64>> {
    check_shapes(contribs)?;
    let n = contribs.len();
    if n < f + 3 {
        return Err(Error::param("f", format!("need at least f + 3 = {} updates, got {n}", f + 3)));
    }
    let neighbours = n - f - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(contribs[i].params.as_slice(), contribs[j].params.as_slice());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Indices (into `contribs`) of the `m` lowest Krum scores; ties go to the
/// lower client id.
pub fn mkrum_select(contribs: &[ClientContribution], f: usize, m: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(contribs, f)?;
    let n = contribs.len();
    if m == 0 || m > n - f - 2 {
        return Err(Error::param("m", format!("must lie in 1..={}, got {m}", n - f - 2)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(contribs[a].client_id.cmp(&contribs[b].client_id))
    });
    order.truncate(m);
    order.sort_unstable();
    Ok(order)
}

pub fn mkrum_aggregate(contribs: &[ClientContribution], f: usize, m: usize) -> Result<ParamVector> {
    let selected = mkrum_select(contribs, f, m)?;
    let chosen: Vec<ClientContribution> = selected.iter().map(|&i| contribs[i].clone()).collect();
    Ok(weighted_mean(&chosen, &vec![1.0; chosen.len()]))
}
