use log::debug;
use serde::{Deserialize, Serialize};

use super::elbo::{draw_uniforms, loss_gradients, ElboBatch};
use super::{calibrate, NpcConfig, NpcModel};
use crate::classifier::Adam;
use crate::data::PredictionSet;
use crate::error::{Error, Result};
use crate::mathcore::{Matrix, RngState};
use crate::prior::{build_priors, PriorTable};

/// Per-epoch means over the training set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NpcHistory {
    pub elbo: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        m.row_mut(i)[l] = 1.0;
    }
    m
}

/// Maximize the ELBO over (x, ŷ) pairs with cached priors.
pub fn train_npc(
    features: &Matrix,
    preds: &PredictionSet,
    priors: &PriorTable,
    cfg: &NpcConfig,
) -> Result<(NpcModel, NpcHistory)> {
    let (n, c) = (preds.len(), preds.classes());
    cfg.validate(c)?;
    if features.rows() != n || priors.len() != n || priors.alpha.cols() != c {
        return Err(Error::shape(format!(
            "{} feature rows, {n} predictions and {} priors",
            features.rows(),
            priors.len()
        )));
    }
    if n == 0 {
        return Err(Error::precondition("cannot train a calibrator on zero samples"));
    }
    let condition = one_hot(&preds.predicted_labels(), c);
    let targets = if cfg.soft_targets { preds.probs().clone() } else { condition.clone() };

    let root = RngState::new(cfg.seed);
    let mut model = NpcModel::new(features.cols(), c, &cfg.hidden, cfg.alpha_floor, &mut root.substream(0))?;
    let mut order_rng = root.substream(1);
    let mut noise_rng = root.substream(2);
    let mut enc_opt = Adam::new(model.encoder(), cfg.learning_rate);
    let mut dec_opt = Adam::new(model.decoder(), cfg.learning_rate);
    let mut history = NpcHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut elbo, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch = ElboBatch::new(
                features.select_rows(idx),
                condition.select_rows(idx),
                targets.select_rows(idx),
                priors.alpha.select_rows(idx),
            )?;
            let uniforms = draw_uniforms(idx.len(), c, cfg.mc_samples, &mut noise_rng);
            let (value, enc_g, dec_g) = loss_gradients(&model, &batch, &uniforms)?;
            if !value.elbo.is_finite() {
                return Err(Error::Training { epoch, reason: format!("non-finite ELBO {}", value.elbo) });
            }
            let (enc, dec) = model.parts_mut();
            enc_opt.step(enc, &enc_g);
            dec_opt.step(dec, &dec_g);
            let w = idx.len() as f64 / n as f64;
            elbo += value.elbo * w;
            rec += value.reconstruction * w;
            kl += value.kl * w;
        }
        if !model.is_finite() {
            return Err(Error::Training { epoch, reason: "parameters diverged".into() });
        }
        debug!("npc epoch {epoch}: elbo {elbo:.4} (reconstruction {rec:.4}, kl {kl:.4})");
        history.elbo.push(elbo);
        history.reconstruction.push(rec);
        history.kl.push(kl);
    }
    Ok((model, history))
}

/// Build the KNN priors from `preds`, then train.
pub fn fit_npc(features: &Matrix, preds: &PredictionSet, cfg: &NpcConfig) -> Result<(NpcModel, PriorTable, NpcHistory)> {
    let priors = build_priors(features, preds, &cfg.prior)?;
    let (model, history) = train_npc(features, preds, &priors, cfg)?;
    Ok((model, priors, history))
}

/// Output of one round of [`iterate_npc`].
#[derive(Debug, Clone)]
pub struct IterationStage {
    pub model: NpcModel,
    pub train: PredictionSet,
    pub eval: Option<PredictionSet>,
}

/// Re-apply calibration `n_iters` times; round t trains a fresh calibrator on
/// round t−1's calibrated training predictions and applies it to both sets.
pub fn iterate_npc(
    features: &Matrix,
    preds: &PredictionSet,
    eval: Option<(&Matrix, &PredictionSet)>,
    cfg: &NpcConfig,
    n_iters: usize,
) -> Result<Vec<IterationStage>> {
    if n_iters == 0 {
        return Err(Error::precondition("at least one calibration round is required"));
    }
    let mut stages: Vec<IterationStage> = Vec::with_capacity(n_iters);
    for t in 0..n_iters {
        let (cur_train, cur_eval) = match stages.last() {
            Some(s) => (&s.train, s.eval.as_ref()),
            None => (preds, eval.map(|e| e.1)),
        };
        let round_cfg = NpcConfig { seed: cfg.seed.wrapping_add(t as u64), ..cfg.clone() };
        let (model, _, _) = fit_npc(features, cur_train, &round_cfg)?;
        let train = calibrate(&model, features, cur_train)?;
        let eval_out = match (eval, cur_eval) {
            (Some((x, _)), Some(p)) => Some(calibrate(&model, x, p)?),
            _ => None,
        };
        stages.push(IterationStage { model, train, eval: eval_out });
    }
    Ok(stages)
}
