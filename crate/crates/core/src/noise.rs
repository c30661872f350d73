//! Synthetic label corruption and the transition matrices it induces.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionSet};
use crate::error::{Error, Result};
use crate::mathcore::{softmax_in_place, Matrix, RngState};

/// 2→7, 3→8, 5↔6.
pub const MNIST_ASN_MAP: [(usize, usize); 4] = [(2, 7), (3, 8), (5, 6), (6, 5)];
/// T-shirt→shirt, pullover→coat, sandal→sneaker.
pub const FMNIST_ASN_MAP: [(usize, usize); 3] = [(0, 6), (2, 4), (5, 7)];
/// Truck→automobile, bird→airplane, deer→horse, cat↔dog.
pub const CIFAR10_ASN_MAP: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

const TRUNC_NORMAL_SD: f64 = 0.1;
const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NoiseKind {
    Sn,
    Asn,
    Idn,
    Sridn,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SN" => Ok(Self::Sn),
            "ASN" => Ok(Self::Asn),
            "IDN" => Ok(Self::Idn),
            "SRIDN" => Ok(Self::Sridn),
            _ => Err(Error::Config(format!("unknown noise kind `{s}` (expected SN, ASN, IDN or SRIDN)"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sn => "SN",
            Self::Asn => "ASN",
            Self::Idn => "IDN",
            Self::Sridn => "SRIDN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asn_map: Option<Vec<(usize, usize)>>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, ratio: f64, seed: u64) -> Self {
        Self { kind, ratio, asn_map: None, seed }
    }

    pub fn with_asn_map(mut self, map: &[(usize, usize)]) -> Self {
        self.asn_map = Some(map.to_vec());
        self
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_ratio(self.ratio)?;
        match (self.kind, &self.asn_map) {
            (NoiseKind::Asn, Some(map)) => validate_map(map, classes),
            (NoiseKind::Asn, None) => Err(Error::precondition("ASN noise needs a class map")),
            (_, Some(_)) => Err(Error::precondition(format!("{} noise takes no class map", self.kind))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdnInternals {
    pub flip_rates: Vec<f64>,
    /// One d×c projection per true class.
    pub projections: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOutcome {
    pub noisy_labels: Vec<usize>,
    /// Row i is p(ỹ = · | y_i, x_i).
    pub per_instance_rows: Option<Matrix>,
    pub idn_internals: Option<IdnInternals>,
}

impl NoiseOutcome {
    pub fn flip_count(&self, true_labels: &[usize]) -> usize {
        self.noisy_labels.iter().zip(true_labels).filter(|(a, b)| a != b).count()
    }
}

/// Row-stochastic c×c matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    entries: Matrix,
    /// Rows that had no support and were filled with the uniform distribution.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    degenerate_rows: Vec<usize>,
}

impl TransitionMatrix {
    pub fn new(entries: Matrix) -> Result<Self> {
        if entries.rows() != entries.cols() {
            return Err(Error::shape(format!("transition matrix must be square, got {:?}", entries.shape())));
        }
        for (i, row) in entries.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("transition row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Validation(format!("transition row {i} sums to {sum}")));
            }
        }
        Ok(Self { entries, degenerate_rows: Vec::new() })
    }

    pub fn identity(c: usize) -> Self {
        Self { entries: Matrix::identity(c), degenerate_rows: Vec::new() }
    }

    /// Average of rows grouped by `groups[i]`; empty groups become uniform rows.
    pub fn from_grouped_rows(rows: &Matrix, groups: &[usize]) -> Result<Self> {
        let c = rows.cols();
        if rows.rows() != groups.len() {
            return Err(Error::shape("one group index per row required"));
        }
        let mut sums = Matrix::zeros(c, c);
        let mut counts = vec![0usize; c];
        for (row, &g) in rows.row_iter().zip(groups) {
            if g >= c {
                return Err(Error::shape(format!("group {g} out of range for {c} classes")));
            }
            counts[g] += 1;
            for (acc, v) in sums.row_mut(g).iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut degenerate = Vec::new();
        for (g, &count) in counts.iter().enumerate() {
            let row = sums.row_mut(g);
            if count == 0 {
                row.fill(1.0 / c as f64);
                degenerate.push(g);
                continue;
            }
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        if !degenerate.is_empty() {
            warn!("transition rows {degenerate:?} have no samples; reported as uniform");
        }
        let mut t = Self::new(sums)?;
        t.degenerate_rows = degenerate;
        Ok(t)
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn classes(&self) -> usize {
        self.entries.rows()
    }

    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate_rows
    }

    pub fn into_matrix(self) -> Matrix {
        self.entries
    }
}

fn check_ratio(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::precondition(format!("noise ratio must lie in [0,1], got {tau}")));
    }
    Ok(())
}

fn validate_map(map: &[(usize, usize)], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    for &(src, dst) in map {
        if src >= classes || dst >= classes {
            return Err(Error::precondition(format!("map entry {src}->{dst} out of range for {classes} classes")));
        }
        if src == dst {
            return Err(Error::precondition(format!("map entry {src}->{dst} is a self-loop")));
        }
        if std::mem::replace(&mut seen[src], true) {
            return Err(Error::precondition(format!("class {src} mapped twice")));
        }
    }
    Ok(())
}

fn labelled(ds: &Dataset) -> Result<&[usize]> {
    if ds.classes() < 2 {
        return Err(Error::precondition("label noise needs at least two classes"));
    }
    ds.require_true_labels()
}

/// Flip each label with probability τ to a uniformly chosen other class.
pub fn inject_symmetric(ds: &Dataset, tau: f64, seed: u64) -> Result<NoiseOutcome> {
    check_ratio(tau)?;
    let y = labelled(ds)?;
    let c = ds.classes();
    let mut rng = RngState::new(seed);
    let off = tau / (c - 1) as f64;
    let mut rows = Matrix::filled(y.len(), c, off);
    let mut noisy = Vec::with_capacity(y.len());
    for (i, &label) in y.iter().enumerate() {
        rows.row_mut(i)[label] = 1.0 - tau;
        let flip = rng.uniform_open() < tau;
        noisy.push(if flip {
            let j = rng.below(c - 1);
            if j >= label {
                j + 1
            } else {
                j
            }
        } else {
            label
        });
    }
    Ok(NoiseOutcome { noisy_labels: noisy, per_instance_rows: Some(rows), idn_internals: None })
}

/// Flip map sources to their target with probability τ.
pub fn inject_asymmetric(ds: &Dataset, tau: f64, map: &[(usize, usize)], seed: u64) -> Result<NoiseOutcome> {
    check_ratio(tau)?;
    let y = labelled(ds)?;
    let c = ds.classes();
    validate_map(map, c)?;
    let mut target = vec![None; c];
    for &(src, dst) in map {
        target[src] = Some(dst);
    }
    let mut rng = RngState::new(seed);
    let mut rows = Matrix::zeros(y.len(), c);
    let mut noisy = Vec::with_capacity(y.len());
    for (i, &label) in y.iter().enumerate() {
        match target[label] {
            Some(dst) => {
                rows.row_mut(i)[label] = 1.0 - tau;
                rows.row_mut(i)[dst] = tau;
                noisy.push(if rng.uniform_open() < tau { dst } else { label });
            }
            None => {
                rows.row_mut(i)[label] = 1.0;
                noisy.push(label);
            }
        }
    }
    Ok(NoiseOutcome { noisy_labels: noisy, per_instance_rows: Some(rows), idn_internals: None })
}

/// Rejection sample from N(mean, sd²) restricted to [0, 1].
fn truncated_normal(rng: &mut RngState, mean: f64, sd: f64) -> f64 {
    loop {
        let v = rng.normal(mean, sd);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Instance-dependent noise: per-sample flip rate q_i, with the flipped mass
/// spread by a random class-specific projection of the features.
pub fn inject_idn(ds: &Dataset, tau: f64, seed: u64) -> Result<NoiseOutcome> {
    check_ratio(tau)?;
    let y = labelled(ds)?;
    let (n, d, c) = (ds.len(), ds.dim(), ds.classes());
    let root = RngState::new(seed);

    let mut q_rng = root.substream(0);
    let flip_rates: Vec<f64> = (0..n).map(|_| truncated_normal(&mut q_rng, tau, TRUNC_NORMAL_SD)).collect();

    let mut w_rng = root.substream(1);
    let projections: Vec<Matrix> = (0..c)
        .map(|_| Matrix::new(d, c, (0..d * c).map(|_| w_rng.standard_normal()).collect()))
        .collect::<Result<_>>()?;

    let mut draw = root.substream(2);
    let mut rows = Matrix::zeros(n, c);
    let mut noisy = Vec::with_capacity(n);
    let x = ds.features();
    for i in 0..n {
        let label = y[i];
        let w = &projections[label];
        let row = rows.row_mut(i);
        for (k, &xk) in x.row(i).iter().enumerate() {
            if xk != 0.0 {
                for (p, wv) in row.iter_mut().zip(w.row(k)) {
                    *p += xk * wv;
                }
            }
        }
        row[label] = f64::NEG_INFINITY;
        softmax_in_place(row);
        let q = flip_rates[i];
        for p in row.iter_mut() {
            *p *= q;
        }
        row[label] = 1.0 - q;
        noisy.push(draw.categorical(row));
    }
    Ok(NoiseOutcome {
        noisy_labels: noisy,
        per_instance_rows: Some(rows),
        idn_internals: Some(IdnInternals { flip_rates, projections }),
    })
}

/// Number of flips for ratio τ: ⌈nτ⌉, guarding against float noise on integers.
pub fn sridn_flip_count(n: usize, tau: f64) -> usize {
    ((n as f64 * tau - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Flip the least-confident samples (by predicted probability of their true
/// class) to their most likely other class until ⌈nτ⌉ labels are noisy.
pub fn inject_sridn(ds: &Dataset, tau: f64, preds: &PredictionSet) -> Result<NoiseOutcome> {
    check_ratio(tau)?;
    let y = labelled(ds)?;
    if preds.len() != y.len() || preds.classes() != ds.classes() {
        return Err(Error::precondition(format!(
            "predictions are {}x{}, dataset is {}x{}",
            preds.len(),
            preds.classes(),
            y.len(),
            ds.classes()
        )));
    }
    let f = preds.probs();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| f[(a, y[a])].total_cmp(&f[(b, y[b])]).then(a.cmp(&b)));
    let mut noisy = y.to_vec();
    for &i in order.iter().take(sridn_flip_count(y.len(), tau)) {
        let row = f.row(i);
        let mut best = None::<usize>;
        for j in (0..row.len()).filter(|&j| j != y[i]) {
            if best.is_none_or(|b| row[j] > row[b]) {
                best = Some(j);
            }
        }
        noisy[i] = best.expect("at least two classes");
    }
    Ok(NoiseOutcome { noisy_labels: noisy, per_instance_rows: None, idn_internals: None })
}

/// Dispatch on `spec.kind`. SRIDN needs predictions from a clean-trained model.
pub fn inject_noise(ds: &Dataset, spec: &NoiseSpec, preds: Option<&PredictionSet>) -> Result<NoiseOutcome> {
    spec.validate(ds.classes())?;
    match spec.kind {
        NoiseKind::Sn => inject_symmetric(ds, spec.ratio, spec.seed),
        NoiseKind::Asn => inject_asymmetric(ds, spec.ratio, spec.asn_map.as_deref().unwrap_or_default(), spec.seed),
        NoiseKind::Idn => inject_idn(ds, spec.ratio, spec.seed),
        NoiseKind::Sridn => {
            let preds = preds.ok_or_else(|| Error::precondition("SRIDN noise needs classifier predictions"))?;
            inject_sridn(ds, spec.ratio, preds)
        }
    }
}

/// Average p(ỹ | y, x) per true class; falls back to empirical label counts
/// when per-instance rows are unavailable.
pub fn true_transition(outcome: &NoiseOutcome, true_labels: &[usize], classes: usize) -> Result<TransitionMatrix> {
    if outcome.noisy_labels.len() != true_labels.len() {
        return Err(Error::shape("noisy and true label vectors differ in length"));
    }
    match &outcome.per_instance_rows {
        Some(rows) => {
            if rows.cols() != classes {
                return Err(Error::shape(format!("rows have {} columns, expected {classes}", rows.cols())));
            }
            TransitionMatrix::from_grouped_rows(rows, true_labels)
        }
        None => {
            let onehot = Matrix::new(
                outcome.noisy_labels.len(),
                classes,
                outcome
                    .noisy_labels
                    .iter()
                    .flat_map(|&l| (0..classes).map(move |j| f64::from(u8::from(j == l))))
                    .collect(),
            )?;
            TransitionMatrix::from_grouped_rows(&onehot, true_labels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clean(n: usize, c: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = RngState::new(seed);
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.uniform_open()).collect()).unwrap();
        Dataset::new(x, c, Some((0..n).map(|i| i % c).collect()), None).unwrap()
    }

    #[test]
    fn symmetric_rows_and_extremes() {
        let ds = clean(50, 10, 2, 0);
        let out = inject_symmetric(&ds, 0.2, 1).unwrap();
        let rows = out.per_instance_rows.unwrap();
        assert!((rows[(0, 0)] - 0.8).abs() < 1e-15);
        assert!((rows[(0, 1)] - 0.2 / 9.0).abs() < 1e-15);
        assert_eq!(inject_symmetric(&ds, 0.0, 1).unwrap().noisy_labels, ds.true_labels().unwrap());

        let two = clean(30, 2, 2, 0);
        let all = inject_symmetric(&two, 1.0, 5).unwrap();
        assert!(all.noisy_labels.iter().zip(two.true_labels().unwrap()).all(|(a, b)| a != b));
    }

    #[test]
    fn symmetric_transition_is_analytic() {
        let ds = clean(200, 10, 2, 0);
        let out = inject_symmetric(&ds, 0.2, 3).unwrap();
        let t = true_transition(&out, ds.true_labels().unwrap(), 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 0.8 } else { 1.0 / 45.0 };
                assert!((t.entries()[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_flip_count_concentrates() {
        let n = 10_000;
        let ds = clean(n, 10, 1, 0);
        for tau in [0.2, 0.8] {
            let flips = inject_symmetric(&ds, tau, 99).unwrap().flip_count(ds.true_labels().unwrap()) as f64;
            let mean = n as f64 * tau;
            let sd = (mean * (1.0 - tau)).sqrt();
            assert!((flips - mean).abs() <= 3.0 * sd, "tau={tau} flips={flips}");
        }
    }

    #[test]
    fn asymmetric_touches_only_sources() {
        let ds = clean(1000, 10, 2, 0);
        let out = inject_asymmetric(&ds, 0.4, &MNIST_ASN_MAP, 7).unwrap();
        let y = ds.true_labels().unwrap();
        for (i, (&t, &n)) in y.iter().zip(&out.noisy_labels).enumerate() {
            if ![2, 3, 5, 6].contains(&t) {
                assert_eq!(t, n, "sample {i}");
            } else if t != n {
                let dst = MNIST_ASN_MAP.iter().find(|m| m.0 == t).unwrap().1;
                assert_eq!(n, dst);
            }
        }
        let one = Dataset::new(Matrix::zeros(1, 1), 2, Some(vec![0]), None).unwrap();
        assert_eq!(inject_asymmetric(&one, 1.0, &[(0, 1)], 0).unwrap().noisy_labels, vec![1]);
        assert_eq!(inject_asymmetric(&ds, 0.0, &MNIST_ASN_MAP, 0).unwrap().noisy_labels, y);
    }

    #[test]
    fn asymmetric_rejects_bad_maps() {
        let ds = clean(10, 3, 1, 0);
        assert!(inject_asymmetric(&ds, 0.2, &[(1, 1)], 0).is_err());
        assert!(inject_asymmetric(&ds, 0.2, &[(0, 3)], 0).is_err());
        assert!(inject_asymmetric(&ds, 0.2, &[(0, 1), (0, 2)], 0).is_err());
        let spec = NoiseSpec::new(NoiseKind::Asn, 0.2, 0);
        assert!(inject_noise(&ds, &spec, None).is_err());
    }

    #[test]
    fn idn_rows_honour_flip_rates() {
        let ds = clean(2000, 10, 5, 4);
        let out = inject_idn(&ds, 0.4, 11).unwrap();
        let rows = out.per_instance_rows.as_ref().unwrap();
        let internals = out.idn_internals.as_ref().unwrap();
        assert_eq!(internals.projections.len(), 10);
        assert_eq!(internals.projections[0].shape(), (5, 10));
        let y = ds.true_labels().unwrap();
        for i in 0..ds.len() {
            let row = rows.row(i);
            assert_eq!(row[y[i]], 1.0 - internals.flip_rates[i]);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let rate = out.flip_count(y) as f64 / ds.len() as f64;
        assert!((rate - 0.4).abs() < 0.03, "rate {rate}");
    }

    #[test]
    fn idn_zero_features_spread_uniformly() {
        let ds = Dataset::new(Matrix::zeros(3, 4), 5, Some(vec![0, 2, 4]), None).unwrap();
        let out = inject_idn(&ds, 0.5, 0).unwrap();
        let rows = out.per_instance_rows.unwrap();
        let q = &out.idn_internals.unwrap().flip_rates;
        for i in 0..3 {
            for j in 0..5 {
                if j != ds.true_labels().unwrap()[i] {
                    assert!((rows[(i, j)] - q[i] / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn truncated_normal_mean() {
        // independent oracle: numerically integrate the truncated density
        let tau: f64 = 0.2;
        let pdf = |v: f64| (-(v - tau).powi(2) / (2.0 * 0.01)).exp();
        let steps = 100_000;
        let (mut num, mut den) = (0.0, 0.0);
        for s in 0..steps {
            let v = (s as f64 + 0.5) / steps as f64;
            num += v * pdf(v);
            den += pdf(v);
        }
        let want = num / den;
        let mut rng = RngState::new(8);
        let m: f64 = (0..200_000).map(|_| truncated_normal(&mut rng, tau, 0.1)).sum::<f64>() / 200_000.0;
        assert!((m - want).abs() < 1e-3, "{m} vs {want}");
    }

    #[test]
    fn sridn_flips_least_confident() {
        let ds = Dataset::new(Matrix::zeros(10, 1), 3, Some(vec![0; 10]), None).unwrap();
        // confidence in class 0 descends with the index except for one tie
        let mut probs = Vec::new();
        for i in 0..10 {
            let p0 = if i == 9 { 0.5 } else { 0.9 - 0.05 * i as f64 };
            probs.extend_from_slice(&[p0, (1.0 - p0) * 0.3, (1.0 - p0) * 0.7]);
        }
        let preds = PredictionSet::new(Matrix::new(10, 3, probs).unwrap(), None).unwrap();
        let out = inject_sridn(&ds, 0.25, &preds).unwrap();
        // confidences: idx 8 → 0.5, idx 9 → 0.5 (tie, index order), idx 7 → 0.55
        let flipped: Vec<usize> = (0..10).filter(|&i| out.noisy_labels[i] != 0).collect();
        assert_eq!(flipped, vec![7, 8, 9]);
        assert!(flipped.iter().all(|&i| out.noisy_labels[i] == 2));
        assert_eq!(inject_sridn(&ds, 0.0, &preds).unwrap().noisy_labels, vec![0; 10]);
        assert_eq!(sridn_flip_count(10, 0.2), 2);
        assert_eq!(sridn_flip_count(10, 0.25), 3);
        assert_eq!(sridn_flip_count(50_000, 0.4), 20_000);
        let spec = NoiseSpec::new(NoiseKind::Sridn, 0.2, 0);
        assert!(matches!(inject_noise(&ds, &spec, None), Err(Error::Precondition(_))));
    }

    #[test]
    fn empirical_transition_and_empty_class() {
        let outcome = NoiseOutcome { noisy_labels: vec![0, 1, 1, 1], per_instance_rows: None, idn_internals: None };
        let t = true_transition(&outcome, &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(t.entries().row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(t.entries().row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(t.degenerate_rows(), &[2]);
        assert!(t.entries().row(2).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_rows_give_identity() {
        let ds = clean(30, 3, 1, 0);
        let out = inject_symmetric(&ds, 0.0, 0).unwrap();
        let t = true_transition(&out, ds.true_labels().unwrap(), 3).unwrap();
        assert_eq!(t.entries(), &Matrix::identity(3));
    }

    #[test]
    fn kind_parsing_and_spec_serde() {
        assert_eq!("sridn".parse::<NoiseKind>().unwrap(), NoiseKind::Sridn);
        assert!("foo".parse::<NoiseKind>().is_err());
        let spec = NoiseSpec::new(NoiseKind::Asn, 0.3, 9).with_asn_map(&MNIST_ASN_MAP);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"ASN\""));
        assert_eq!(serde_json::from_str::<NoiseSpec>(&json).unwrap(), spec);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn transition_rows_are_stochastic(tau in 0.0f64..=1.0, seed in any::<u64>(), kind in 0usize..3) {
            let ds = clean(120, 4, 3, seed);
            let out = match kind {
                0 => inject_symmetric(&ds, tau, seed).unwrap(),
                1 => inject_asymmetric(&ds, tau, &[(0, 1), (2, 3)], seed).unwrap(),
                _ => inject_idn(&ds, tau, seed).unwrap(),
            };
            let t = true_transition(&out, ds.true_labels().unwrap(), 4).unwrap();
            for row in t.entries().row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for row in out.per_instance_rows.unwrap().row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn injection_is_seed_deterministic(tau in 0.0f64..=1.0, seed in any::<u64>()) {
            let ds = clean(60, 5, 2, 1);
            prop_assert_eq!(inject_idn(&ds, tau, seed).unwrap(), inject_idn(&ds, tau, seed).unwrap());
            prop_assert_eq!(inject_symmetric(&ds, tau, seed).unwrap(), inject_symmetric(&ds, tau, seed).unwrap());
        }
    }
}
