use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::{Matrix, RngState};

/// Isotropic Gaussian mixture with one cluster per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.samples < self.classes {
            return Err(Error::Config("synthetic data needs at least one sample per class".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("synthetic data needs dimension >= 2".into()));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::Config("cluster spread must be positive".into()));
        }
        Ok(())
    }

    /// Cluster centre of `class`: radius `4 · spread` on a circle in the first
    /// two coordinates, zero elsewhere.
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let radius = 4.0 * self.cluster_spread;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / self.classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = radius * angle.cos();
        m[1] = radius * angle.sin();
        m
    }

    /// Samples per class: the first `n mod c` classes get one extra.
    pub fn class_counts(&self) -> Vec<usize> {
        let base = self.samples / self.classes;
        let extra = self.samples % self.classes;
        (0..self.classes).map(|k| base + usize::from(k < extra)).collect()
    }
}

/// Samples are emitted grouped by class. Features are rounded to `f32` so the
/// dataset survives the binary format unchanged.
pub fn generate_gaussian_mixture(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let mut values = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for (class, count) in spec.class_counts().into_iter().enumerate() {
        let mean = spec.mean(class);
        for _ in 0..count {
            for &m in &mean {
                let v = rng.normal(m, spec.cluster_spread);
                values.push(v as f32 as f64);
            }
            labels.push(class);
        }
    }
    let features = Matrix::new(spec.samples, spec.dim, values)?;
    Dataset::new(features, spec.classes, Some(labels), None)
}
