//! Dataset and prediction containers plus their exchange formats.

mod idx;
pub(crate) mod io;
mod synthetic;

pub use idx::{load_idx_dataset, read_idx_images, read_idx_labels};
pub use io::{load_dataset, load_predictions, read_dataset, read_predictions, save_dataset, save_predictions, write_dataset, write_predictions};
pub use synthetic::{generate_gaussian_mixture, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{Matrix, RngState};

/// Tolerance on probability row sums for in-memory prediction sets.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;
/// Looser tolerance applied when reading `f32` prediction files.
pub const LOAD_ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Features with optional clean and corrupted labels. Labels are 0-indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    classes: usize,
    true_labels: Option<Vec<usize>>,
    noisy_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        classes: usize,
        true_labels: Option<Vec<usize>>,
        noisy_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Validation("dataset needs at least one class".into()));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain non-finite values".into()));
        }
        for (name, labels) in [("true", &true_labels), ("noisy", &noisy_labels)] {
            if let Some(labels) = labels {
                check_labels(name, labels, features.rows(), classes)?;
            }
        }
        Ok(Self {
            features,
            classes,
            true_labels,
            noisy_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn noisy_labels(&self) -> Option<&[usize]> {
        self.noisy_labels.as_deref()
    }

    pub fn require_true_labels(&self) -> Result<&[usize]> {
        self.true_labels()
            .ok_or_else(|| Error::precondition("dataset has no true labels"))
    }

    pub fn require_noisy_labels(&self) -> Result<&[usize]> {
        self.noisy_labels()
            .ok_or_else(|| Error::precondition("dataset has no noisy labels"))
    }

    /// Noisy labels when present, otherwise the clean ones.
    pub fn training_labels(&self) -> Result<&[usize]> {
        self.noisy_labels()
            .or(self.true_labels())
            .ok_or_else(|| Error::precondition("dataset has no labels"))
    }

    pub fn with_noisy_labels(mut self, noisy: Vec<usize>) -> Result<Self> {
        check_labels("noisy", &noisy, self.len(), self.classes)?;
        self.noisy_labels = Some(noisy);
        Ok(self)
    }

    pub fn without_noisy_labels(mut self) -> Self {
        self.noisy_labels = None;
        self
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |labels: &Option<Vec<usize>>| {
            labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect())
        };
        Self {
            features: self.features.select_rows(indices),
            classes: self.classes,
            true_labels: pick(&self.true_labels),
            noisy_labels: pick(&self.noisy_labels),
        }
    }

    /// Per-feature min-max scaling to [0, 1]; constant features map to 0.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        normalize_min_max(&mut out.features);
        out
    }
}

fn check_labels(name: &str, labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{name} labels have length {}, expected {n}",
            labels.len()
        )));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= classes) {
        return Err(Error::Validation(format!(
            "{name} label {l} at index {i} is outside [0, {classes})"
        )));
    }
    Ok(())
}

pub fn normalize_min_max(features: &mut Matrix) {
    let (n, d) = features.shape();
    for j in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            lo = lo.min(features[(i, j)]);
            hi = hi.max(features[(i, j)]);
        }
        let span = hi - lo;
        for i in 0..n {
            features[(i, j)] = if span > 0.0 {
                (features[(i, j)] - lo) / span
            } else {
                0.0
            };
        }
    }
}

/// Class-probability rows from a black-box classifier, plus optional embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    probs: Matrix,
    embeddings: Option<Matrix>,
}

impl PredictionSet {
    pub fn new(probs: Matrix, embeddings: Option<Matrix>) -> Result<Self> {
        validate_probs(&probs, ROW_SUM_TOLERANCE)?;
        Self::assemble(probs, embeddings)
    }

    pub(crate) fn assemble(probs: Matrix, embeddings: Option<Matrix>) -> Result<Self> {
        if let Some(e) = &embeddings {
            if e.rows() != probs.rows() {
                return Err(Error::shape(format!(
                    "{} embedding rows for {} prediction rows",
                    e.rows(),
                    probs.rows()
                )));
            }
        }
        Ok(Self { probs, embeddings })
    }

    /// One-hot rows for hard labels.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut probs = Matrix::zeros(labels.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Validation(format!("label {l} outside [0, {classes})")));
            }
            probs[(i, l)] = 1.0;
        }
        Ok(Self {
            probs,
            embeddings: None,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn embeddings(&self) -> Option<&Matrix> {
        self.embeddings.as_ref()
    }

    pub fn with_embeddings(mut self, embeddings: Option<Matrix>) -> Result<Self> {
        if let Some(e) = &embeddings {
            if e.rows() != self.len() {
                return Err(Error::shape("embedding row count mismatch"));
            }
        }
        self.embeddings = embeddings;
        Ok(self)
    }

    /// `ŷ`: argmax of every row.
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    /// Largest probability in every row.
    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            probs: self.probs.select_rows(indices),
            embeddings: self.embeddings.as_ref().map(|e| e.select_rows(indices)),
        }
    }
}

fn validate_probs(probs: &Matrix, tolerance: f64) -> Result<()> {
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(format!(
                "prediction row {i} has a negative or non-finite entry"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > tolerance {
            return Err(Error::Validation(format!(
                "prediction row {i} sums to {total}, not 1"
            )));
        }
    }
    Ok(())
}

/// Shuffled index partition: `round(n · test_fraction)` indices (at least one,
/// at most n−1) go to the test side. Both sides are returned sorted.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::precondition("splitting needs at least two samples"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::precondition(format!(
            "test fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Deterministic disjoint split into `(train, test)`.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let feats = Matrix::new(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(feats, 3, Some(labels), None).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = toy(10);
        let (train, test) = train_test_split(&ds, 0.2, 7).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));

        let (a, b) = split_indices(10, 0.5, 3).unwrap();
        let (a2, b2) = split_indices(10, 0.5, 3).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_preserves_labels() {
        let ds = toy(30);
        let (tr, _) = split_indices(30, 0.3, 1).unwrap();
        let sub = ds.subset(&tr);
        for (row, &i) in tr.iter().enumerate() {
            assert_eq!(sub.true_labels().unwrap()[row], ds.true_labels().unwrap()[i]);
            assert_eq!(sub.features().row(row), ds.features().row(i));
        }
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_validation() {
        let f = Matrix::zeros(3, 2);
        assert!(Dataset::new(f.clone(), 2, Some(vec![0, 1, 2]), None).is_err());
        assert!(Dataset::new(f.clone(), 2, Some(vec![0, 1]), None).is_err());
        assert!(Dataset::new(Matrix::filled(1, 1, f64::NAN), 2, None, None).is_err());
        assert!(Dataset::new(f, 2, Some(vec![0, 1, 1]), Some(vec![1, 1, 0])).is_ok());
    }

    #[test]
    fn prediction_validation() {
        let bad = Matrix::from_rows(&[[0.25, 0.25]]).unwrap();
        assert!(PredictionSet::new(bad, None).is_err());
        let neg = Matrix::from_rows(&[[1.5, -0.5]]).unwrap();
        assert!(PredictionSet::new(neg, None).is_err());
        let ok = Matrix::from_rows(&[[0.3, 0.7], [0.9, 0.1]]).unwrap();
        let ps = PredictionSet::new(ok, None).unwrap();
        assert_eq!(ps.predicted_labels(), vec![1, 0]);
        assert_eq!(ps.confidences(), vec![0.7, 0.9]);
        assert!(ps.with_embeddings(Some(Matrix::zeros(3, 4))).is_err());
    }

    #[test]
    fn min_max_scaling() {
        let mut m = Matrix::from_rows(&[[0.0, 5.0], [10.0, 5.0], [5.0, 5.0]]).unwrap();
        normalize_min_max(&mut m);
        assert_eq!(m.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.5, 0.0]);
    }
}
