//! From calibration matrices back to noise transition matrices.
//!
//! Conventions: `T[y][ỹ] = p(ỹ | y)`, `A[ŷ][ỹ] = p(ŷ | ỹ, x)`,
//! `H[ŷ][y] = p(y | ŷ, x)`. Under ŷ ⊥ y | ỹ,
//! `H[k][j] = p(y=j) / p(ŷ=k) · Σ_i A[k][i] T[j][i]`.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classifier::{fit_softmax, smoothed_targets, MlpModel, TrainConfig};
use crate::data::{Dataset, PredictionSet};
use crate::error::{Error, Result};
use crate::mathcore::{softmax_in_place, Matrix, RngState};
use crate::noise::TransitionMatrix;
use crate::npc::{calibration_matrices, NpcModel};

pub const DEFAULT_CONDITION_CAP: f64 = 1e6;

/// Network for p(ŷ | ỹ, x) on input x ⊕ one-hot ỹ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxModel {
    net: MlpModel,
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Matrix {
    smoothed_targets(labels, classes, 0.0)
}

impl AuxModel {
    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    /// p(ŷ | ỹ = label_i, x_i) for each row.
    pub fn predict(&self, features: &Matrix, noisy_labels: &[usize]) -> Result<Matrix> {
        let input = features.hstack(&one_hot_rows(noisy_labels, self.classes()))?;
        let mut out = self.net.forward(&input)?;
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    /// Stacked A(x_i) blocks (rows `i·c .. (i+1)·c`); column ỹ of a block is
    /// the network output for that ỹ.
    pub fn matrices(&self, features: &Matrix) -> Result<Matrix> {
        let (n, c) = (features.rows(), self.classes());
        let mut out = Matrix::zeros(n * c, c);
        const CHUNK: usize = 256;
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(CHUNK) {
            let rows: Vec<usize> = chunk.iter().flat_map(|&i| std::iter::repeat_n(i, c)).collect();
            let labels: Vec<usize> = (0..rows.len()).map(|r| r % c).collect();
            let p = self.predict(&features.select_rows(&rows), &labels)?;
            for (r, &i) in rows.iter().enumerate() {
                let noisy = r % c;
                for k in 0..c {
                    out[(i * c + k, noisy)] = p[(r, k)];
                }
            }
        }
        Ok(out)
    }
}

/// Fit p(ŷ | ỹ, x) by cross-entropy against the classifier's argmax.
pub fn train_aux(ds: &Dataset, preds: &PredictionSet, cfg: &TrainConfig) -> Result<AuxModel> {
    cfg.validate()?;
    let noisy = ds.require_noisy_labels()?;
    if preds.len() != ds.len() || preds.classes() != ds.classes() {
        return Err(Error::shape("predictions do not match the dataset"));
    }
    let c = ds.classes();
    let input = ds.features().hstack(&one_hot_rows(noisy, c))?;
    let targets = one_hot_rows(&preds.predicted_labels(), c);
    let mut rng = RngState::new(cfg.seed);
    let mut dims = vec![input.cols()];
    dims.extend(&cfg.hidden);
    dims.push(c);
    let mut net = MlpModel::new(&dims, &mut rng.substream(1))?;
    fit_softmax(&mut net, &input, &targets, cfg.epochs, cfg.learning_rate, cfg.batch_size, &mut rng, |_, _| Ok(false))?;
    Ok(AuxModel { net })
}

fn check_square(name: &str, m: &Matrix, c: usize) -> Result<()> {
    if m.shape() != (c, c) {
        return Err(Error::shape(format!("{name} is {:?}, expected {c}x{c}", m.shape())));
    }
    Ok(())
}

/// Calibration matrix implied by a transition matrix and the auxiliary
/// conditional. Requires every p(ŷ = k | x) > 0.
pub fn h_from_t(t: &Matrix, p_clean: &[f64], p_pred: &[f64], a: &Matrix) -> Result<Matrix> {
    let c = p_clean.len();
    check_square("T", t, c)?;
    check_square("A", a, c)?;
    if p_pred.len() != c {
        return Err(Error::shape("p(ŷ|x) length differs from p(y|x)"));
    }
    if let Some(k) = p_pred.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::precondition(format!("p(ŷ={k}|x) must be positive")));
    }
    // A · Tᵀ gives p(ŷ = k | y = j)
    let a_tt = a.matmul_t(t)?;
    let mut h = Matrix::zeros(c, c);
    for k in 0..c {
        for j in 0..c {
            h[(k, j)] = p_clean[j] / p_pred[k] * a_tt[(k, j)];
        }
    }
    Ok(h)
}

/// Per-instance recovery result.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceSolve {
    Solved(Matrix),
    /// A(x) too ill-conditioned (or singular) to invert reliably.
    Flagged { condition: f64 },
}

impl InstanceSolve {
    pub fn matrix(&self) -> Option<&Matrix> {
        match self {
            Self::Solved(m) => Some(m),
            Self::Flagged { .. } => None,
        }
    }
}

/// Invert [`h_from_t`]: least squares for each row of T, then clamp negative
/// entries to zero and renormalize rows.
pub fn solve_t_instance(
    h: &Matrix,
    p_clean: &[f64],
    p_pred: &[f64],
    a: &Matrix,
    condition_cap: f64,
) -> Result<InstanceSolve> {
    let c = p_clean.len();
    check_square("H", h, c)?;
    check_square("A", a, c)?;
    if p_pred.len() != c {
        return Err(Error::shape("p(ŷ|x) length differs from p(y|x)"));
    }
    if let Some(j) = p_clean.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::precondition(format!("p(y={j}|x) must be positive")));
    }
    let svd = DMatrix::from_row_slice(c, c, a.as_slice()).svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !(condition <= condition_cap) {
        return Ok(InstanceSolve::Flagged { condition });
    }
    // column j of rhs: b_kj = H_kj · p(ŷ=k) / p(y=j), the j-th row of T transposed
    let rhs = DMatrix::from_fn(c, c, |k, j| h[(k, j)] * p_pred[k] / p_clean[j]);
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Validation(format!("least-squares solve failed: {e}")))?;
    let mut t = Matrix::zeros(c, c);
    for j in 0..c {
        let row = t.row_mut(j);
        for (i, v) in row.iter_mut().enumerate() {
            *v = sol[(i, j)].max(0.0);
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    Ok(InstanceSolve::Solved(t))
}

/// Class-conditional mean of per-instance matrices: row i averages row i of
/// T(x) over solved instances whose true label is i.
pub fn aggregate_t(per_instance: &[InstanceSolve], true_labels: &[usize], classes: usize) -> Result<TransitionMatrix> {
    if per_instance.len() != true_labels.len() {
        return Err(Error::shape("one true label per instance required"));
    }
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (solve, &y) in per_instance.iter().zip(true_labels) {
        if let Some(t) = solve.matrix() {
            check_square("T(x)", t, classes)?;
            rows.extend_from_slice(t.row(y));
            groups.push(y);
        }
    }
    TransitionMatrix::from_grouped_rows(&Matrix::new(groups.len(), classes, rows)?, &groups)
}

/// Mean squared difference over all entries.
pub fn transition_mse(estimate: &Matrix, truth: &Matrix) -> Result<f64> {
    if estimate.shape() != truth.shape() || estimate.rows() == 0 {
        return Err(Error::shape(format!("cannot compare {:?} with {:?}", estimate.shape(), truth.shape())));
    }
    let sq: f64 = estimate.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / estimate.as_slice().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub aggregate: TransitionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub excluded: usize,
    pub exclusion_rate: f64,
    /// Per-instance matrices (`None` where flagged); not serialized.
    #[serde(skip)]
    pub per_instance: Vec<Option<Matrix>>,
}

/// Recover T(x) for every sample from the classifier output, the calibrated
/// output and the calibrator's H(x), then aggregate by true class.
pub fn estimate_transition(
    features: &Matrix,
    preds: &PredictionSet,
    calibrated: &PredictionSet,
    npc: &NpcModel,
    aux: &AuxModel,
    true_labels: &[usize],
    truth: Option<&TransitionMatrix>,
    condition_cap: f64,
) -> Result<TransitionEstimate> {
    let (n, c) = (preds.len(), preds.classes());
    if calibrated.len() != n || features.rows() != n || true_labels.len() != n {
        return Err(Error::shape("features, predictions and labels must align"));
    }
    let h_stack = calibration_matrices(npc, features)?;
    let a_stack = aux.matrices(features)?;
    let block = |m: &Matrix, i: usize| m.select_rows(&(i * c..(i + 1) * c).collect::<Vec<_>>());
    let mut solves = Vec::with_capacity(n);
    for i in 0..n {
        let solve = solve_t_instance(
            &block(&h_stack, i),
            calibrated.probs().row(i),
            preds.probs().row(i),
            &block(&a_stack, i),
            condition_cap,
        )
        .unwrap_or(InstanceSolve::Flagged { condition: f64::NAN });
        solves.push(solve);
    }
    let excluded = solves.iter().filter(|s| s.matrix().is_none()).count();
    if excluded > 0 {
        warn!("{excluded} of {n} instances excluded from transition aggregation");
    }
    let aggregate = aggregate_t(&solves, true_labels, c)?;
    let mse = truth.map(|t| transition_mse(aggregate.entries(), t.entries())).transpose()?;
    Ok(TransitionEstimate {
        aggregate,
        mse,
        excluded,
        exclusion_rate: excluded as f64 / n.max(1) as f64,
        per_instance: solves.into_iter().map(|s| s.matrix().cloned()).collect(),
    })
}

/// Plain c×c CSV, one matrix row per line.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn save_matrix_csv(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    crate::data::io::write_file(path.as_ref(), matrix_to_csv(m).as_bytes())
}
