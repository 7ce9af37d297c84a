//! Labeled sample containers shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled dataset with a dense, row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking shape, label range and finiteness.
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::param("num_classes", "must be at least 2"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature matrix size",
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        if let Some(pos) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {} at sample {pos} is outside [0, {num_classes})",
                labels[pos]
            )));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature at sample {}",
                pos / input_dim
            )));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature row of sample `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    /// Concatenates datasets of identical shape.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::EmptyData("no datasets to concatenate".into()))?;
        let mut out = first.clone();
        for part in iter {
            if part.input_dim != out.input_dim {
                return Err(Error::DimensionMismatch {
                    what: "input_dim",
                    expected: out.input_dim,
                    actual: part.input_dim,
                });
            }
            out.num_classes = out.num_classes.max(part.num_classes);
            out.features.extend_from_slice(&part.features);
            out.labels.extend_from_slice(&part.labels);
        }
        Ok(out)
    }
}

/// One client's local training data.
///
/// `is_corrupted` records whether a corruption injector touched this client;
/// the server never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
    pub is_corrupted: bool,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Self {
        Self {
            client_id,
            data,
            is_corrupted: false,
        }
    }

    /// Local sample count m_i.
    pub fn sample_count(&self) -> usize {
        self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Dataset::new(2, 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(Dataset::new(1, 2, vec![0.0, 1.0], vec![0, 2]).is_err());
        assert!(Dataset::new(1, 2, vec![0.0, f64::NAN], vec![0, 1]).is_err());
        assert!(Dataset::new(1, 1, vec![0.0], vec![0]).is_err());
    }

    #[test]
    fn select_and_concat() {
        let d = Dataset::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0, 1, 2]).unwrap();
        let s = d.select(&[2, 0]);
        assert_eq!(s.labels(), &[2, 0]);
        assert_eq!(s.row(0), &[4.0, 5.0]);
        let c = Dataset::concat([&s, &d]).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.class_counts(), vec![2, 1, 2]);
    }
}
