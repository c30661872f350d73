use serde::{Deserialize, Serialize};

use crate::data::PredictionSet;
use crate::error::{Error, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("label vectors differ in length ({a} vs {b})")));
    }
    Ok(())
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::precondition("accuracy of an empty set"));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Counts with rows indexed by the true class and columns by the prediction.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    same_len(pred.len(), truth.len())?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::shape(format!("label outside [0, {classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Eight-region breakdown of classifier vs post-processor hits. The clean
/// subset (noisy label correct) fills `a..d`, the noisy subset `e..h`; within
/// each, the order is (miss, miss), (miss, hit), (hit, hit), (hit, miss) for
/// (classifier, post-processor).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VennCounts {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
    pub e: u64,
    pub f: u64,
    pub g: u64,
    pub h: u64,
}

impl VennCounts {
    pub fn from_array(v: [u64; 8]) -> Self {
        let [a, b, c, d, e, f, g, h] = v;
        Self { a, b, c, d, e, f, g, h }
    }

    pub fn to_array(self) -> [u64; 8] {
        [self.a, self.b, self.c, self.d, self.e, self.f, self.g, self.h]
    }

    pub fn total(&self) -> u64 {
        self.to_array().iter().sum()
    }

    pub fn clean_total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Fixed by post-processing minus broken by it: (b + f) − (d + h).
    pub fn net_gain(&self) -> i64 {
        (self.b + self.f) as i64 - (self.d + self.h) as i64
    }
}

pub fn venn_counts(truth: &[usize], noisy: &[usize], classifier: &[usize], post: &[usize]) -> Result<VennCounts> {
    same_len(truth.len(), noisy.len())?;
    same_len(truth.len(), classifier.len())?;
    same_len(truth.len(), post.len())?;
    let mut v = [0u64; 8];
    for i in 0..truth.len() {
        let base = if noisy[i] == truth[i] { 0 } else { 4 };
        let region = match (classifier[i] == truth[i], post[i] == truth[i]) {
            (false, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (true, false) => 3,
        };
        v[base + region] += 1;
    }
    Ok(VennCounts::from_array(v))
}

pub fn net_gain(v: &VennCounts) -> i64 {
    v.net_gain()
}

/// A sample whose given label disagrees with the calibrated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
}

/// Disagreements between `labels` and `calibrated`, most confident first
/// (ties by index).
pub fn disagreements(labels: &[usize], calibrated: &PredictionSet) -> Result<Vec<Disagreement>> {
    same_len(labels.len(), calibrated.len())?;
    let pred = calibrated.predicted_labels();
    let conf = calibrated.confidences();
    let mut out: Vec<Disagreement> = (0..labels.len())
        .filter(|&i| pred[i] != labels[i])
        .map(|i| Disagreement { index: i, label: labels[i], predicted: pred[i], confidence: conf[i] })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    Ok(out)
}
