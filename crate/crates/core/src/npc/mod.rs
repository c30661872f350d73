//! Noisy prediction calibration: a Dirichlet-latent variational model of the
//! clean label given the classifier's prediction and the input.
//!
//! Training consumes features and classifier outputs only; no label vector
//! is ever passed in.

mod elbo;
mod train;

use serde::{Deserialize, Serialize};

pub use elbo::{elbo, elbo_frozen, loss_gradients, ElboBatch, ElboValue};
pub use train::{fit_npc, iterate_npc, train_npc, IterationStage, NpcHistory};

use crate::classifier::MlpModel;
use crate::data::io::{put_u32, ByteReader};
use crate::data::PredictionSet;
use crate::error::{Error, Result};
use crate::mathcore::{DirichletParams, Matrix, RngState};
use crate::prior::PriorConfig;

use elbo::softplus;

/// Each concentration is raised to at least `1 + MODE_EPS` before taking the
/// mode, which is undefined otherwise.
pub const MODE_EPS: f64 = 1e-3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpcConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub alpha_floor: f64,
    pub hidden: Vec<usize>,
    /// Reconstruct the full prediction row instead of its one-hot argmax.
    pub soft_targets: bool,
    pub prior: PriorConfig,
}

impl Default for NpcConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
            mc_samples: 1,
            alpha_floor: 1e-4,
            hidden: vec![128, 128],
            soft_targets: false,
            prior: PriorConfig::default(),
        }
    }
}

impl NpcConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("epochs, batch size and mc samples must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.alpha_floor > 0.0) {
            return Err(Error::Config("learning rate and alpha floor must be positive".into()));
        }
        self.prior.validate(classes)
    }
}

/// Encoder (x ⊕ ŷ → α̂ via softplus) and decoder (x ⊕ y → per-class logits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpcModel {
    encoder: MlpModel,
    decoder: MlpModel,
    alpha_floor: f64,
}

impl NpcModel {
    pub fn new(dim: usize, classes: usize, hidden: &[usize], alpha_floor: f64, rng: &mut RngState) -> Result<Self> {
        let mut dims = vec![dim + classes];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let encoder = MlpModel::new(&dims, &mut rng.substream(0))?;
        let decoder = MlpModel::new(&dims, &mut rng.substream(1))?;
        Self::from_parts(encoder, decoder, alpha_floor)
    }

    pub fn from_parts(encoder: MlpModel, decoder: MlpModel, alpha_floor: f64) -> Result<Self> {
        let c = encoder.output_dim();
        if c < 2 || decoder.output_dim() != c || encoder.input_dim() != decoder.input_dim() || encoder.input_dim() <= c {
            return Err(Error::shape(format!(
                "encoder {:?} and decoder {:?} do not form a calibrator",
                encoder.layer_dims(),
                decoder.layer_dims()
            )));
        }
        if !(alpha_floor > 0.0) {
            return Err(Error::Config("alpha floor must be positive".into()));
        }
        Ok(Self { encoder, decoder, alpha_floor })
    }

    pub fn encoder(&self) -> &MlpModel {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpModel {
        &self.decoder
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut MlpModel, &mut MlpModel) {
        (&mut self.encoder, &mut self.decoder)
    }

    pub fn classes(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn dim(&self) -> usize {
        self.encoder.input_dim() - self.classes()
    }

    pub fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    /// `NPCN` bytes: magic, version, config JSON (length-prefixed), then
    /// encoder and decoder `NPCM` blocks.
    pub fn to_bytes(&self, cfg: &NpcConfig) -> Result<Vec<u8>> {
        let echo = serde_json::to_vec(cfg)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut out, echo.len())?;
        out.extend_from_slice(&echo);
        out.extend(self.encoder.to_bytes()?);
        out.extend(self.decoder.to_bytes()?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, NpcConfig)> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported calibrator version {version}")));
        }
        let len = r.u32_le("config length")? as usize;
        let at = r.offset();
        let cfg: NpcConfig =
            serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::format(at, format!("config: {e}")))?;
        let encoder = MlpModel::read_from(&mut r)?;
        let decoder = MlpModel::read_from(&mut r)?;
        r.finish()?;
        Ok((Self::from_parts(encoder, decoder, cfg.alpha_floor)?, cfg))
    }

    pub fn save(&self, cfg: &NpcConfig, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::data::io::write_file(path.as_ref(), &self.to_bytes(cfg)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, NpcConfig)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Posterior concentration α̂ for input `x` conditioned on predicted class `k`.
pub fn posterior_alpha(model: &NpcModel, x: &[f64], k: usize) -> Result<DirichletParams> {
    let c = model.classes();
    if k >= c || x.len() != model.dim() {
        return Err(Error::shape(format!("query (dim {}, class {k}) does not fit the model", x.len())));
    }
    let mut input = x.to_vec();
    input.extend((0..c).map(|j| f64::from(u8::from(j == k))));
    let out = model.encoder.forward(&Matrix::new(1, input.len(), input)?)?;
    DirichletParams::new(out.row(0).iter().map(|&z| softplus(z).max(model.alpha_floor)).collect())
}

/// Mode of Dir(α) after raising each component to `1 + MODE_EPS`.
pub fn posterior_mode(alpha: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = alpha.iter().map(|&a| a.max(1.0 + MODE_EPS) - 1.0).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / total).collect()
}

/// Stack of per-instance calibration matrices: rows `i·c .. (i+1)·c` hold
/// H(x_i), whose row k is the posterior mode given ŷ = k.
pub fn calibration_matrices(model: &NpcModel, features: &Matrix) -> Result<Matrix> {
    const CHUNK: usize = 256;
    let (n, c) = (features.rows(), model.classes());
    if features.cols() != model.dim() {
        return Err(Error::shape(format!("features have {} columns, model expects {}", features.cols(), model.dim())));
    }
    let mut out = Vec::with_capacity(n * c * c);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let rows: Vec<usize> = chunk.iter().flat_map(|&i| std::iter::repeat_n(i, c)).collect();
        let onehots = Matrix::new(
            rows.len(),
            c,
            (0..rows.len()).flat_map(|r| (0..c).map(move |j| f64::from(u8::from(j == r % c)))).collect(),
        )?;
        let z = model.encoder.forward(&features.select_rows(&rows).hstack(&onehots)?)?;
        for row in z.row_iter() {
            let alpha: Vec<f64> = row.iter().map(|&v| softplus(v).max(model.alpha_floor)).collect();
            out.extend(posterior_mode(&alpha));
        }
    }
    Matrix::new(n * c, c, out)
}

/// H(x) for a single input.
pub fn calibration_matrix(model: &NpcModel, x: &[f64]) -> Result<Matrix> {
    calibration_matrices(model, &Matrix::new(1, x.len(), x.to_vec())?)
}

/// p(y | x) = Σ_k H_k(x) · p(ŷ = k | x), keeping the input embeddings.
pub fn calibrate(model: &NpcModel, features: &Matrix, preds: &PredictionSet) -> Result<PredictionSet> {
    if features.rows() != preds.len() || preds.classes() != model.classes() {
        return Err(Error::shape(format!(
            "{} feature rows and {}x{} predictions for a {}-class model",
            features.rows(),
            preds.len(),
            preds.classes(),
            model.classes()
        )));
    }
    let h = calibration_matrices(model, features)?;
    PredictionSet::assemble(mix(&h, preds.probs())?, preds.embeddings().cloned())
}

/// Row i of the result is `p_iᵀ · H(x_i)` for stacked H blocks.
pub(crate) fn mix(h_stack: &Matrix, probs: &Matrix) -> Result<Matrix> {
    let (n, c) = probs.shape();
    if h_stack.shape() != (n * c, c) {
        return Err(Error::shape("calibration stack does not match predictions"));
    }
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let row = out.row_mut(i);
        for k in 0..c {
            let p = probs[(i, k)];
            for (o, h) in row.iter_mut().zip(h_stack.row(i * c + k)) {
                *o += p * h;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
