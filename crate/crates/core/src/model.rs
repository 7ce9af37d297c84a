//! Softmax classifiers trained from scratch: multinomial logistic regression
//! and a one-hidden-layer ReLU MLP.
//!
//! Parameters live in one flat [`ParamVector`]. Layouts, all row-major:
//!
//! * logistic: `W[C×D] | b[C]`
//! * mlp: `W1[H×D] | b1[H] | W2[C×H] | b2[C]`

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Per-sample losses are capped at `-ln(1e-12)`.
pub const MIN_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelArch {
    Logistic {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
}

impl ModelArch {
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelArch::Logistic { input_dim, .. } | ModelArch::Mlp { input_dim, .. } => input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelArch::Logistic { num_classes, .. } | ModelArch::Mlp { num_classes, .. } => {
                num_classes
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            ModelArch::Logistic {
                input_dim,
                num_classes,
            } => (input_dim + 1) * num_classes,
            ModelArch::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => (input_dim + 1) * hidden_dim + (hidden_dim + 1) * num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if self.num_classes() < 2 {
            return Err(Error::param("num_classes", "must be at least 2"));
        }
        if let ModelArch::Mlp { hidden_dim: 0, .. } = self {
            return Err(Error::param("hidden_dim", "must be positive"));
        }
        Ok(())
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector length",
                expected: self.param_count(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.input_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: self.input_dim(),
                actual: data.input_dim(),
            });
        }
        if data.num_classes() > self.num_classes() {
            return Err(Error::DimensionMismatch {
                what: "number of classes",
                expected: self.num_classes(),
                actual: data.num_classes(),
            });
        }
        Ok(())
    }
}

/// Flat model parameters, the unit exchanged between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(arch: &ModelArch) -> Self {
        Self(vec![0.0; arch.param_count()])
    }

    /// Seeded uniform init in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`,
    /// per weight matrix. Biases start at zero.
    pub fn init(arch: &ModelArch, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut values = Vec::with_capacity(arch.param_count());
        let mut layer = |values: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-r..=r)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        };
        match *arch {
            ModelArch::Logistic {
                input_dim,
                num_classes,
            } => layer(&mut values, input_dim, num_classes),
            ModelArch::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                layer(&mut values, input_dim, hidden_dim);
                layer(&mut values, hidden_dim, num_classes);
            }
        }
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Local SGD settings (learning rate, local epochs, batch size, seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::param("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Scratch buffers for one forward/backward pass.
struct Scratch {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(arch: &ModelArch) -> Self {
        let hidden = match *arch {
            ModelArch::Mlp { hidden_dim, .. } => hidden_dim,
            ModelArch::Logistic { .. } => 0,
        };
        Self {
            logits: vec![0.0; arch.num_classes()],
            hidden: vec![0.0; hidden],
            dhidden: vec![0.0; hidden],
        }
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks_exact(d).zip(bias)) {
        *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Fills `scratch.logits` (and the hidden activations for the MLP).
fn forward(arch: &ModelArch, w: &[f64], x: &[f64], s: &mut Scratch) {
    match *arch {
        ModelArch::Logistic {
            input_dim,
            num_classes,
        } => {
            let (wm, b) = w.split_at(input_dim * num_classes);
            affine(wm, b, x, &mut s.logits);
        }
        ModelArch::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let (w1, rest) = w.split_at(input_dim * hidden_dim);
            let (b1, rest) = rest.split_at(hidden_dim);
            let (w2, b2) = rest.split_at(hidden_dim * num_classes);
            affine(w1, b1, x, &mut s.hidden);
            for h in s.hidden.iter_mut() {
                *h = h.max(0.0);
            }
            affine(w2, b2, &s.hidden, &mut s.logits);
        }
    }
}

/// Turns logits into probabilities in place and returns the capped
/// cross-entropy of class `y`.
fn softmax_xent(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
    -logits[y].max(MIN_PROB).ln()
}

/// Loss of one sample; when `grad` is given, adds `scale * ∇loss` into it.
///
/// The gradient is that of the uncapped cross-entropy so that confidently
/// wrong samples still produce a signal.
fn sample_loss(
    arch: &ModelArch,
    w: &[f64],
    x: &[f64],
    y: usize,
    grad: Option<(&mut [f64], f64)>,
    s: &mut Scratch,
) -> f64 {
    forward(arch, w, x, s);
    let loss = softmax_xent(&mut s.logits, y);
    let Some((g, scale)) = grad else {
        return loss;
    };
    // dz = softmax - onehot, scaled.
    s.logits[y] -= 1.0;
    for dz in s.logits.iter_mut() {
        *dz *= scale;
    }
    match *arch {
        ModelArch::Logistic {
            input_dim,
            num_classes,
        } => {
            let (gw, gb) = g.split_at_mut(input_dim * num_classes);
            for ((row, gbc), &dz) in gw.chunks_exact_mut(input_dim).zip(gb).zip(&s.logits) {
                *gbc += dz;
                for (gij, xj) in row.iter_mut().zip(x) {
                    *gij += dz * xj;
                }
            }
        }
        ModelArch::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let (w2, _) = w[input_dim * hidden_dim + hidden_dim..].split_at(hidden_dim * num_classes);
            let (gw1, rest) = g.split_at_mut(input_dim * hidden_dim);
            let (gb1, rest) = rest.split_at_mut(hidden_dim);
            let (gw2, gb2) = rest.split_at_mut(hidden_dim * num_classes);

            s.dhidden.iter_mut().for_each(|v| *v = 0.0);
            for (c, &dz) in s.logits.iter().enumerate() {
                gb2[c] += dz;
                let grow = &mut gw2[c * hidden_dim..(c + 1) * hidden_dim];
                let wrow = &w2[c * hidden_dim..(c + 1) * hidden_dim];
                for k in 0..hidden_dim {
                    grow[k] += dz * s.hidden[k];
                    s.dhidden[k] += dz * wrow[k];
                }
            }
            for k in 0..hidden_dim {
                // ReLU gate: hidden[k] > 0 iff its pre-activation was positive.
                if s.hidden[k] <= 0.0 {
                    continue;
                }
                let dpre = s.dhidden[k];
                gb1[k] += dpre;
                for (gkj, xj) in gw1[k * input_dim..(k + 1) * input_dim].iter_mut().zip(x) {
                    *gkj += dpre * xj;
                }
            }
        }
    }
    loss
}

/// Mean cross-entropy of `w` over every sample in `data`.
pub fn empirical_loss(w: &ParamVector, arch: &ModelArch, data: &Dataset) -> Result<f64> {
    arch.check_params(w)?;
    arch.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("cannot evaluate loss on an empty dataset".into()));
    }
    let mut s = Scratch::new(arch);
    let total: f64 = (0..data.len())
        .map(|i| sample_loss(arch, w.as_slice(), data.row(i), data.labels()[i], None, &mut s))
        .sum();
    Ok(total / data.len() as f64)
}

/// Cross-entropy of a single sample.
pub fn sample_cross_entropy(w: &ParamVector, arch: &ModelArch, x: &[f64], y: usize) -> Result<f64> {
    arch.check_params(w)?;
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: arch.input_dim(),
            actual: x.len(),
        });
    }
    let mut s = Scratch::new(arch);
    Ok(sample_loss(arch, w.as_slice(), x, y, None, &mut s))
}

fn batch_gradient_into(
    w: &[f64],
    arch: &ModelArch,
    data: &Dataset,
    batch: &[usize],
    grad: &mut [f64],
    s: &mut Scratch,
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        loss += sample_loss(arch, w, data.row(i), data.labels()[i], Some((&mut *grad, scale)), s);
    }
    loss * scale
}

/// Gradient of the mean loss over the samples of `data` listed in `batch`.
pub fn loss_gradient(
    w: &ParamVector,
    arch: &ModelArch,
    data: &Dataset,
    batch: &[usize],
) -> Result<ParamVector> {
    arch.check_params(w)?;
    arch.check_data(data)?;
    if batch.is_empty() {
        return Err(Error::EmptyData("gradient of an empty batch".into()));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidInput(format!(
            "batch index {i} out of range for {} samples",
            data.len()
        )));
    }
    let mut grad = vec![0.0; w.len()];
    let mut s = Scratch::new(arch);
    batch_gradient_into(w.as_slice(), arch, data, batch, &mut grad, &mut s);
    Ok(ParamVector(grad))
}

/// Local training on one client.
///
/// The reported loss is measured on the *incoming* model, before any SGD
/// step. Training then runs `local_epochs` passes of minibatch SGD over a
/// fresh permutation each epoch; the final batch may be short. Randomness
/// comes from a stream keyed by `(cfg.seed, client_id, round)`.
pub fn client_update(
    client_id: usize,
    w: &ParamVector,
    arch: &ModelArch,
    data: &Dataset,
    cfg: &TrainConfig,
    round: u64,
) -> Result<(ParamVector, f64)> {
    cfg.validate()?;
    let reported_loss = empirical_loss(w, arch, data)?;
    let mut params = w.clone();
    if cfg.local_epochs == 0 || cfg.learning_rate == 0.0 {
        return Ok((params, reported_loss));
    }

    let mut rng = rng::stream(cfg.seed, &[tag::CLIENT, client_id as u64, round]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut s = Scratch::new(arch);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            batch_gradient_into(params.as_slice(), arch, data, batch, &mut grad, &mut s);
            for (p, g) in params.as_mut_slice().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!(
            "client {client_id} diverged to non-finite parameters in round {round}"
        )));
    }
    Ok((params, reported_loss))
}

/// Index of the largest class score; ties go to the lowest index.
pub fn predict(w: &ParamVector, arch: &ModelArch, x: &[f64]) -> Result<usize> {
    arch.check_params(w)?;
    let mut s = Scratch::new(arch);
    forward(arch, w.as_slice(), x, &mut s);
    Ok(argmax(&s.logits))
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = c;
        }
    }
    best
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_accuracy(w: &ParamVector, arch: &ModelArch, data: &Dataset) -> Result<f64> {
    arch.check_params(w)?;
    arch.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("cannot evaluate accuracy on an empty dataset".into()));
    }
    let mut s = Scratch::new(arch);
    let correct = (0..data.len())
        .filter(|&i| {
            forward(arch, w.as_slice(), data.row(i), &mut s);
            argmax(&s.logits) == data.labels()[i]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Loss and accuracy in one pass.
pub fn evaluate(w: &ParamVector, arch: &ModelArch, data: &Dataset) -> Result<(f64, f64)> {
    arch.check_params(w)?;
    arch.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("cannot evaluate on an empty dataset".into()));
    }
    let mut s = Scratch::new(arch);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let y = data.labels()[i];
        forward(arch, w.as_slice(), data.row(i), &mut s);
        if argmax(&s.logits) == y {
            correct += 1;
        }
        loss += softmax_xent(&mut s.logits, y);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
