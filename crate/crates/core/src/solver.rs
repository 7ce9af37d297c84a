//! Closed-form client weights for the auto-weighted objective
//!
//! ```text
//! min_α  Σ α_i L_i + (λ/2) Σ α_i² / m_i    s.t. α ≥ 0, Σ α_i = 1
//! ```
//!
//! With losses sorted ascending, `M_k = Σ_{i≤k} m_i` and `L̄_k` the
//! sample-weighted mean of the first `k` losses, the support size `p` is the
//! largest `k` with `1 + M_k (L̄_k − L_k) / λ > 0` and
//!
//! ```text
//! α_i = (m_i / M_p) · [1 + M_p (L̄_p − L_i) / λ]_+
//! ```
//!
//! A client whose loss reaches `λ / M_p + L̄_p` gets weight zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest tolerated drift of Σα from 1 before renormalization.
pub const SUM_DRIFT_TOLERANCE: f64 = 1e-9;

/// Client weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(Error::InvalidInput(format!("weight {a} is negative or non-finite")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SUM_DRIFT_TOLERANCE {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// `α_i = m_i / Σ m`.
    pub fn proportional(sample_counts: &[usize]) -> Self {
        let total: usize = sample_counts.iter().sum();
        Self(sample_counts.iter().map(|&m| m as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&a| a > 0.0).count()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverInput {
    pub losses: Vec<f64>,
    pub sample_counts: Vec<usize>,
    pub lambda: f64,
}

impl SolverInput {
    pub fn new(losses: Vec<f64>, sample_counts: Vec<usize>, lambda: f64) -> Self {
        Self {
            losses,
            sample_counts,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::InvalidInput("no clients".into()));
        }
        if self.losses.len() != self.sample_counts.len() {
            return Err(Error::DimensionMismatch {
                what: "sample_counts length",
                expected: self.losses.len(),
                actual: self.sample_counts.len(),
            });
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", format!("must be finite and > 0, got {}", self.lambda)));
        }
        if let Some((i, l)) = self.losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::InvalidInput(format!("loss of client {i} is {l}")));
        }
        if let Some(i) = self.sample_counts.iter().position(|&m| m == 0) {
            return Err(Error::InvalidInput(format!("client {i} has zero samples")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    /// Weights in the original client order.
    pub weights: WeightVector,
    /// Number of non-zero weights.
    pub p: usize,
    /// L̄_p.
    pub p_average_loss: f64,
    /// λ / M_p + L̄_p.
    pub threshold: f64,
}

/// Client indices ordered by (loss, index).
pub fn sort_order(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order
}

/// Support size for losses already sorted ascending, with their sample
/// counts in the same order. Scans every `k` and keeps the largest one that
/// satisfies the positivity condition, so the result is at least 1.
pub fn select_p(sorted_losses: &[f64], sorted_counts: &[usize], lambda: f64) -> usize {
    debug_assert_eq!(sorted_losses.len(), sorted_counts.len());
    // Losses are taken relative to the smallest one; for tiny λ the
    // rounding error of the running mean would otherwise dominate.
    let base = sorted_losses[0];
    let mut p = 1;
    let mut mass = 0.0;
    let mut weighted = 0.0;
    for (k, (&loss, &m)) in sorted_losses.iter().zip(sorted_counts).enumerate() {
        let gap = loss - base;
        mass += m as f64;
        weighted += m as f64 * gap;
        let mean = weighted / mass;
        if 1.0 + mass * (mean - gap) / lambda > 0.0 {
            p = k + 1;
        }
    }
    p
}

/// The unique minimizer of the weighting objective for fixed losses.
pub fn solve_weights(input: &SolverInput) -> Result<SolverOutput> {
    input.validate()?;
    let order = sort_order(&input.losses);
    let sorted_losses: Vec<f64> = order.iter().map(|&i| input.losses[i]).collect();
    let sorted_counts: Vec<usize> = order.iter().map(|&i| input.sample_counts[i]).collect();
    let p = select_p(&sorted_losses, &sorted_counts, input.lambda);

    let base = sorted_losses[0];
    let mass_p: f64 = sorted_counts[..p].iter().map(|&m| m as f64).sum();
    let mean_gap = sorted_losses[..p]
        .iter()
        .zip(&sorted_counts[..p])
        .map(|(l, &m)| m as f64 * (l - base))
        .sum::<f64>()
        / mass_p;
    let mean_p = base + mean_gap;

    let mut alpha = vec![0.0; input.losses.len()];
    for &i in &order[..p] {
        let m = input.sample_counts[i] as f64;
        // Written as m/M_p + m(L̄_p − L_i)/λ so the two parts of Σα cancel
        // without large intermediate terms.
        alpha[i] = (m / mass_p + m * (mean_gap - (input.losses[i] - base)) / input.lambda).max(0.0);
    }

    let sum: f64 = alpha.iter().sum();
    if sum.is_nan() || (sum - 1.0).abs() >= SUM_DRIFT_TOLERANCE {
        return Err(Error::Numerical(format!(
            "closed-form weights sum to {sum} (drift exceeds {SUM_DRIFT_TOLERANCE})"
        )));
    }
    alpha.iter_mut().for_each(|a| *a /= sum);

    Ok(SolverOutput {
        weights: WeightVector(alpha),
        p,
        p_average_loss: mean_p,
        threshold: input.lambda / mass_p + mean_p,
    })
}

/// `Σ α_i L_i + (λ/2) Σ α_i² / m_i`.
pub fn objective_value(losses: &[f64], alpha: &[f64], sample_counts: &[usize], lambda: f64) -> Result<f64> {
    if alpha.len() != losses.len() || sample_counts.len() != losses.len() {
        return Err(Error::DimensionMismatch {
            what: "objective argument length",
            expected: losses.len(),
            actual: if alpha.len() != losses.len() {
                alpha.len()
            } else {
                sample_counts.len()
            },
        });
    }
    let linear: f64 = alpha.iter().zip(losses).map(|(a, l)| a * l).sum();
    let quadratic: f64 = alpha
        .iter()
        .zip(sample_counts)
        .map(|(a, &m)| a * a / m as f64)
        .sum();
    Ok(linear + 0.5 * lambda * quadratic)
}

/// Optimality diagnostics for a candidate weight vector.
///
/// The equality multiplier is recovered over the support as
/// `η = (Σ_S m_i L_i + λ) / Σ_S m_i`, and the bound multipliers from
/// stationarity as `β_i = L_i + λ α_i / m_i − η`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub eta: f64,
    pub beta: Vec<f64>,
    /// max |β_i| over the support (β must vanish where α_i > 0).
    pub stationarity: f64,
    /// max(|Σα − 1|, max_i −α_i).
    pub primal_feasibility: f64,
    /// max_i −β_i, floored at 0.
    pub dual_feasibility: f64,
    /// max_i |α_i β_i|.
    pub complementary_slackness: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementary_slackness)
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.max_residual() < tol
    }
}

pub fn kkt_residuals(input: &SolverInput, alpha: &[f64]) -> Result<KktReport> {
    input.validate()?;
    if alpha.len() != input.losses.len() {
        return Err(Error::DimensionMismatch {
            what: "alpha length",
            expected: input.losses.len(),
            actual: alpha.len(),
        });
    }
    let (mut mass, mut weighted) = (0.0, 0.0);
    for ((&a, &l), &m) in alpha.iter().zip(&input.losses).zip(&input.sample_counts) {
        if a > 0.0 {
            mass += m as f64;
            weighted += m as f64 * l;
        }
    }
    if mass == 0.0 {
        return Err(Error::InvalidInput("alpha has empty support".into()));
    }
    let eta = (weighted + input.lambda) / mass;
    let beta: Vec<f64> = alpha
        .iter()
        .zip(&input.losses)
        .zip(&input.sample_counts)
        .map(|((&a, &l), &m)| l + input.lambda * a / m as f64 - eta)
        .collect();

    let sum: f64 = alpha.iter().sum();
    let negativity = alpha.iter().fold(0.0f64, |acc, &a| acc.max(-a));
    let mut stationarity = 0.0f64;
    let mut dual = 0.0f64;
    let mut slack = 0.0f64;
    for (&a, &b) in alpha.iter().zip(&beta) {
        if a > 0.0 {
            stationarity = stationarity.max(b.abs());
        }
        dual = dual.max(-b);
        slack = slack.max((a * b).abs());
    }
    Ok(KktReport {
        eta,
        beta,
        stationarity,
        primal_feasibility: (sum - 1.0).abs().max(negativity),
        dual_feasibility: dual,
        complementary_slackness: slack,
    })
}
