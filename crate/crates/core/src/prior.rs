//! KNN prior over the latent clean label: high-confidence samples act as
//! anchors, every sample takes a vote among its nearest anchors, and the vote
//! becomes a peaked Dirichlet prior.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::PredictionSet;
use crate::error::{Error, Result};
use crate::mathcore::{argmax, DirichletParams, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum AnchorRule {
    /// Keep samples whose top probability is at least this value.
    Threshold(f64),
    /// Keep the most confident fraction of each predicted class.
    TopFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    Top1,
    TopM(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    Raw,
    /// Classifier penultimate activations; falls back to raw when absent.
    Embedding,
}

impl std::str::FromStr for FeatureSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "embedding" => Ok(Self::Embedding),
            _ => Err(Error::Config(format!("unknown feature space `{s}` (expected raw or embedding)"))),
        }
    }
}

/// Default: 100 neighbours in input space (embeddings of a classifier that
/// memorized its labels cluster mislabeled points with their noisy class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub k: usize,
    pub anchor_rule: AnchorRule,
    pub delta: f64,
    pub rho: f64,
    pub variant: PriorVariant,
    pub feature_space: FeatureSpace,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            k: 100,
            anchor_rule: AnchorRule::TopFraction(0.25),
            delta: 1.0,
            rho: 10.0,
            variant: PriorVariant::Top1,
            feature_space: FeatureSpace::Raw,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) || !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config("delta and rho must be positive and finite".into()));
        }
        match self.anchor_rule {
            AnchorRule::Threshold(t) | AnchorRule::TopFraction(t) if !(t > 0.0 && t <= 1.0) => {
                return Err(Error::Config(format!("anchor rule value must lie in (0,1], got {t}")));
            }
            _ => {}
        }
        if let PriorVariant::TopM(m) = self.variant {
            if m == 0 || m > classes {
                return Err(Error::Config(format!("TOP-M needs 1 <= M <= {classes}, got {m}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one KNN vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Votes {
    pub y_bar: usize,
    /// Fraction of neighbours voting for each class.
    pub fractions: Vec<f64>,
}

/// Priors for a whole sample set, cached before NPC training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    /// Row i is α for sample i.
    pub alpha: Matrix,
    pub y_bar: Vec<usize>,
    pub anchors: Vec<usize>,
}

impl PriorTable {
    pub fn len(&self) -> usize {
        self.alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.rows() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            alpha: self.alpha.select_rows(indices),
            y_bar: indices.iter().map(|&i| self.y_bar[i]).collect(),
            anchors: Vec::new(),
        }
    }
}

/// Indices of confident samples, sorted ascending. Never empty for non-empty
/// input: if the rule keeps nothing, the most confident sample of every
/// predicted class is used.
pub fn select_anchors(preds: &PredictionSet, rule: AnchorRule) -> Vec<usize> {
    let conf = preds.confidences();
    let labels = preds.predicted_labels();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); preds.classes()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    }

    let mut picked: Vec<usize> = match rule {
        AnchorRule::Threshold(t) => (0..conf.len()).filter(|&i| conf[i] >= t).collect(),
        AnchorRule::TopFraction(f) => by_class
            .iter()
            .flat_map(|m| {
                let keep = ((m.len() as f64 * f - 1e-9).ceil() as usize).clamp(1, m.len().max(1));
                m.iter().take(keep).copied()
            })
            .collect(),
    };
    if picked.is_empty() {
        picked = by_class.iter().filter_map(|m| m.first().copied()).collect();
    }
    picked.sort_unstable();
    picked
}

/// Squared Euclidean distances between every query row and every anchor row.
fn squared_distances(queries: &Matrix, anchors: &Matrix) -> Result<Matrix> {
    let mut d = queries.matmul_t(anchors)?;
    let qn: Vec<f64> = queries.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let an: Vec<f64> = anchors.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    for (i, q) in qn.iter().enumerate() {
        for (v, a) in d.row_mut(i).iter_mut().zip(&an) {
            *v = q + a - 2.0 * *v;
        }
    }
    Ok(d)
}

fn tally(nearest: &[usize], anchor_labels: &[usize], classes: usize) -> Votes {
    let mut counts = vec![0.0; classes];
    for &a in nearest {
        counts[anchor_labels[a]] += 1.0;
    }
    let total = nearest.len() as f64;
    let fractions: Vec<f64> = counts.iter().map(|c| c / total).collect();
    Votes { y_bar: argmax(&fractions), fractions }
}

/// k nearest anchors of one distance row, ties broken by anchor index.
fn nearest(dist: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Majority vote of the k nearest anchors (Euclidean). Vote ties go to the
/// lowest class index. `k` is capped at the number of anchors.
pub fn knn_vote(
    query: &[f64],
    anchor_features: &Matrix,
    anchor_labels: &[usize],
    classes: usize,
    k: usize,
) -> Result<Votes> {
    Ok(knn_vote_batch(&Matrix::new(1, query.len(), query.to_vec())?, anchor_features, anchor_labels, classes, k)?
        .pop()
        .expect("one query"))
}

pub fn knn_vote_batch(
    queries: &Matrix,
    anchor_features: &Matrix,
    anchor_labels: &[usize],
    classes: usize,
    k: usize,
) -> Result<Vec<Votes>> {
    if anchor_features.rows() == 0 {
        return Err(Error::precondition("KNN vote needs at least one anchor"));
    }
    if anchor_labels.len() != anchor_features.rows() {
        return Err(Error::shape("one label per anchor required"));
    }
    if queries.cols() != anchor_features.cols() {
        return Err(Error::shape(format!(
            "query dim {} differs from anchor dim {}",
            queries.cols(),
            anchor_features.cols()
        )));
    }
    if anchor_labels.iter().any(|&l| l >= classes) {
        return Err(Error::shape("anchor label out of range"));
    }
    let k = k.clamp(1, anchor_features.rows());
    const CHUNK: usize = 512;
    let all: Vec<usize> = (0..queries.rows()).collect();
    let mut out = Vec::with_capacity(queries.rows());
    for chunk in all.chunks(CHUNK) {
        let d = squared_distances(&queries.select_rows(chunk), anchor_features)?;
        for row in d.row_iter() {
            out.push(tally(&nearest(row, k), anchor_labels, classes));
        }
    }
    Ok(out)
}

/// TOP1: δ everywhere plus ρ on ȳ. TOPM: δ + ρ·fraction on the M most-voted
/// classes, δ elsewhere.
pub fn build_alpha(votes: &Votes, cfg: &PriorConfig) -> Result<DirichletParams> {
    let c = votes.fractions.len();
    let mut alpha = vec![cfg.delta; c];
    match cfg.variant {
        PriorVariant::Top1 => alpha[votes.y_bar] += cfg.rho,
        PriorVariant::TopM(m) => {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| votes.fractions[b].total_cmp(&votes.fractions[a]).then(a.cmp(&b)));
            for &k in order.iter().take(m.min(c)) {
                alpha[k] += cfg.rho * votes.fractions[k];
            }
        }
    }
    DirichletParams::new(alpha)
}

/// Votes and priors for every sample in `preds`. `raw_features` is used when
/// the configured space is raw or the predictions carry no embeddings.
/// `k` capped at the smallest non-empty per-class anchor count, so every
/// represented class can still win a neighbourhood outright.
pub fn effective_k(k: usize, anchor_labels: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &l in anchor_labels {
        counts[l] += 1;
    }
    counts.into_iter().filter(|&n| n > 0).min().map_or(k, |m| k.min(m)).max(1)
}

pub fn build_priors(raw_features: &Matrix, preds: &PredictionSet, cfg: &PriorConfig) -> Result<PriorTable> {
    cfg.validate(preds.classes())?;
    if raw_features.rows() != preds.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} predictions",
            raw_features.rows(),
            preds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::precondition("cannot build priors for an empty prediction set"));
    }
    let space = match (cfg.feature_space, preds.embeddings()) {
        (FeatureSpace::Embedding, Some(e)) => e,
        (FeatureSpace::Embedding, None) => {
            info!("predictions carry no embeddings; KNN prior uses raw features");
            raw_features
        }
        (FeatureSpace::Raw, _) => raw_features,
    };
    let anchors = select_anchors(preds, cfg.anchor_rule);
    let labels = preds.predicted_labels();
    let anchor_labels: Vec<usize> = anchors.iter().map(|&i| labels[i]).collect();
    let c = preds.classes();
    let k = effective_k(cfg.k, &anchor_labels, c);
    if k < cfg.k {
        info!("k reduced from {} to {k}, the smallest per-class anchor count", cfg.k);
    }
    let votes = knn_vote_batch(space, &space.select_rows(&anchors), &anchor_labels, c, k)?;
    let mut alpha = Vec::with_capacity(votes.len() * c);
    let mut y_bar = Vec::with_capacity(votes.len());
    for v in &votes {
        alpha.extend(build_alpha(v, cfg)?.into_vec());
        y_bar.push(v.y_bar);
    }
    Ok(PriorTable { alpha: Matrix::new(votes.len(), c, alpha)?, y_bar, anchors })
}
