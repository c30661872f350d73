use serde::{Deserialize, Serialize};

use super::mlp::{Adam, MlpModel};
use crate::data::{split_indices, Dataset, PredictionSet};
use crate::error::{Error, Result};
use crate::mathcore::{softmax_in_place, Matrix, RngState};

/// Hold out part of the training set and keep the parameters with the best
/// held-out accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub val_fraction: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Label smoothing factor ε; 0 is plain cross-entropy.
    pub smoothing: f64,
    pub early_stop: Option<EarlyStop>,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
            smoothing: 0.0,
            early_stop: None,
            hidden: vec![128, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing must lie in [0,1), got {}", self.smoothing)));
        }
        if let Some(es) = &self.early_stop {
            if !(es.val_fraction > 0.0 && es.val_fraction < 1.0) || es.patience == 0 {
                return Err(Error::Config("early stop needs val_fraction in (0,1) and patience >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// Held-out accuracy per epoch (early stopping only).
    pub val_accuracies: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Smoothed one-hot targets: `1 − ε + ε/c` on the label, `ε/c` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Matrix {
    let off = smoothing / classes as f64;
    let mut t = Matrix::filled(labels.len(), classes, off);
    for (i, &l) in labels.iter().enumerate() {
        t[(i, l)] = 1.0 - smoothing + off;
    }
    t
}

/// Mean cross-entropy of `logits` against soft `targets`, and its gradient.
pub(crate) fn softmax_cross_entropy(logits: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = grad.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        for (j, z) in row.iter_mut().enumerate() {
            let t = targets[(i, j)];
            loss -= t * (*z - log_norm);
            *z = ((*z - log_norm).exp() - t) / n;
        }
    }
    (loss / n, grad)
}

/// Minibatch Adam on softmax cross-entropy. `after_epoch` may request a stop.
pub(crate) fn fit_softmax(
    model: &mut MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut RngState,
    mut after_epoch: impl FnMut(usize, &MlpModel) -> Result<bool>,
) -> Result<Vec<f64>> {
    let n = inputs.rows();
    let mut opt = Adam::new(model, learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(batch_size.max(1)) {
            let x = inputs.select_rows(batch);
            let t = targets.select_rows(batch);
            let trace = model.forward_trace(&x)?;
            let (loss, grad) = softmax_cross_entropy(&trace.output, &t);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            let (grads, _) = model.backward(&trace, &grad)?;
            opt.step(model, &grads);
        }
        losses.push(total / n as f64);
        if after_epoch(epoch, model)? {
            break;
        }
    }
    Ok(losses)
}

/// Train the baseline classifier on the dataset's noisy labels.
pub fn train_classifier(ds: &Dataset, cfg: &TrainConfig) -> Result<MlpModel> {
    let labels = ds.require_noisy_labels()?;
    Ok(fit_classifier(ds.features(), labels, ds.classes(), cfg)?.0)
}

/// Train on explicit labels, returning the model and its per-epoch history.
pub fn fit_classifier(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    if features.rows() != labels.len() || features.rows() == 0 {
        return Err(Error::shape("features and labels must have the same non-zero length"));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut dims = vec![features.cols()];
    dims.extend(&cfg.hidden);
    dims.push(classes);
    let mut model = MlpModel::new(&dims, &mut rng.substream(1))?;
    let mut history = TrainHistory::default();

    let Some(es) = &cfg.early_stop else {
        let targets = smoothed_targets(labels, classes, cfg.smoothing);
        history.losses = fit_softmax(
            &mut model,
            features,
            &targets,
            cfg.epochs,
            cfg.learning_rate,
            cfg.batch_size,
            &mut rng,
            |_, _| Ok(false),
        )?;
        return Ok((model, history));
    };

    let (fit_idx, val_idx) = split_indices(features.rows(), es.val_fraction, cfg.seed ^ 0x5EED)?;
    let fit_x = features.select_rows(&fit_idx);
    let fit_labels: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
    let val_x = features.select_rows(&val_idx);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    let targets = smoothed_targets(&fit_labels, classes, cfg.smoothing);

    let mut best: Option<(f64, usize, MlpModel)> = None;
    let mut val_acc = Vec::new();
    history.losses = fit_softmax(
        &mut model,
        &fit_x,
        &targets,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        &mut rng,
        |epoch, m| {
            let preds = m.forward(&val_x)?.argmax_rows();
            let acc = preds.iter().zip(&val_labels).filter(|(a, b)| a == b).count() as f64
                / val_labels.len() as f64;
            val_acc.push(acc);
            let improved = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch, m.clone()));
            }
            let since_best = epoch - best.as_ref().map_or(epoch, |b| b.1);
            Ok(since_best >= es.patience)
        },
    )?;
    history.val_accuracies = val_acc;
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok((best_model, history))
}

/// Class probabilities (softmax of logits) and last-hidden-layer embeddings.
pub fn predict(model: &MlpModel, features: &Matrix) -> Result<PredictionSet> {
    const CHUNK: usize = 2048;
    let n = features.rows();
    let c = model.output_dim();
    let mut probs = Vec::with_capacity(n * c);
    let mut emb: Option<Vec<f64>> = None;
    let mut emb_dim = 0;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let trace = model.forward_trace(&features.select_rows(chunk))?;
        for row in trace.output.row_iter() {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.extend_from_slice(&p);
        }
        if let Some(e) = trace.embeddings() {
            emb_dim = e.cols();
            emb.get_or_insert_with(Vec::new).extend_from_slice(e.as_slice());
        }
    }
    if n == 0 {
        // Still validate the dimension so an empty query reports mismatches.
        model.forward_trace(&Matrix::zeros(0, features.cols()))?;
    }
    let embeddings = emb.map(|v| Matrix::new(n, emb_dim, v)).transpose()?;
    PredictionSet::new(Matrix::new(n, c, probs)?, embeddings)
}
