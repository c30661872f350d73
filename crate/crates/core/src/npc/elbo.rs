//! Evidence lower bound of the calibrator and its reparameterized gradient.

use super::NpcModel;
use crate::classifier::{Gradients, Trace};
use crate::error::{Error, Result};
use crate::mathcore::{d_ln_icdf, kl_multigamma_grad, kl_multigamma_raw, ln_icdf, softmax_in_place, Matrix, RngState};

/// One minibatch: features, the ŷ the encoder conditions on, the ŷ the
/// decoder reconstructs, and the cached prior α for each row.
#[derive(Debug, Clone)]
pub struct ElboBatch {
    pub features: Matrix,
    pub condition: Matrix,
    pub targets: Matrix,
    pub prior: Matrix,
}

impl ElboBatch {
    pub fn new(features: Matrix, condition: Matrix, targets: Matrix, prior: Matrix) -> Result<Self> {
        let (b, c) = condition.shape();
        if features.rows() != b || targets.shape() != (b, c) || prior.shape() != (b, c) {
            return Err(Error::shape(format!(
                "batch parts disagree: features {:?}, condition {:?}, targets {:?}, prior {:?}",
                features.shape(),
                condition.shape(),
                targets.shape(),
                prior.shape()
            )));
        }
        if prior.as_slice().iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Validation("prior concentrations must be positive and finite".into()));
        }
        Ok(Self { features, condition, targets, prior })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.condition.cols()
    }
}

/// Batch means; `elbo = reconstruction − kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    enc_trace: Trace,
    alpha_hat: Matrix,
    /// Simplex samples, one block of b rows per Monte-Carlo draw.
    samples: Matrix,
    dec_trace: Trace,
    value: ElboValue,
}

fn forward(model: &NpcModel, batch: &ElboBatch, uniforms: &[Matrix]) -> Result<Forward> {
    let (b, c) = (batch.len(), batch.classes());
    if c != model.classes() {
        return Err(Error::shape(format!("batch has {c} classes, model {}", model.classes())));
    }
    if uniforms.is_empty() || uniforms.iter().any(|u| u.shape() != (b, c)) {
        return Err(Error::shape("need at least one b×c uniform block per Monte-Carlo draw"));
    }
    let enc_trace = model.encoder().forward_trace(&batch.features.hstack(&batch.condition)?)?;
    let alpha_hat = enc_trace.output.map(|z| softplus(z).max(model.alpha_floor()));

    let m = uniforms.len();
    let mut samples = Matrix::zeros(b * m, c);
    for (s, u) in uniforms.iter().enumerate() {
        for i in 0..b {
            let row = samples.row_mut(s * b + i);
            for k in 0..c {
                row[k] = ln_icdf(u[(i, k)], alpha_hat[(i, k)]);
            }
            softmax_in_place(row);
        }
    }
    let repeated: Vec<usize> = (0..b * m).map(|r| r % b).collect();
    let dec_in = batch.features.select_rows(&repeated).hstack(&samples)?;
    let dec_trace = model.decoder().forward_trace(&dec_in)?;

    // Bernoulli log-likelihood written in logits: t·o − softplus(o)
    let mut rec = 0.0;
    for r in 0..b * m {
        let t = batch.targets.row(r % b);
        for (k, &o) in dec_trace.output.row(r).iter().enumerate() {
            rec += t[k] * o - softplus(o);
        }
    }
    rec /= (b * m) as f64;
    let kl = (0..b).map(|i| kl_multigamma_raw(alpha_hat.row(i), batch.prior.row(i))).sum::<f64>() / b as f64;
    let value = ElboValue { elbo: rec - kl, reconstruction: rec, kl };
    Ok(Forward { enc_trace, alpha_hat, samples, dec_trace, value })
}

/// ELBO with the reparameterization noise supplied by the caller
/// (one b×c block of open-interval uniforms per Monte-Carlo draw).
pub fn elbo_frozen(model: &NpcModel, batch: &ElboBatch, uniforms: &[Matrix]) -> Result<ElboValue> {
    Ok(forward(model, batch, uniforms)?.value)
}

/// ELBO estimate using `mc_samples` fresh draws from `rng`.
pub fn elbo(model: &NpcModel, batch: &ElboBatch, mc_samples: usize, rng: &mut RngState) -> Result<ElboValue> {
    elbo_frozen(model, batch, &draw_uniforms(batch.len(), batch.classes(), mc_samples, rng))
}

pub(crate) fn draw_uniforms(b: usize, c: usize, mc_samples: usize, rng: &mut RngState) -> Vec<Matrix> {
    (0..mc_samples.max(1))
        .map(|_| Matrix::new(b, c, (0..b * c).map(|_| rng.uniform_open()).collect()).expect("sized"))
        .collect()
}

/// Gradients of the loss −ELBO for encoder and decoder, with frozen noise.
pub fn loss_gradients(
    model: &NpcModel,
    batch: &ElboBatch,
    uniforms: &[Matrix],
) -> Result<(ElboValue, Gradients, Gradients)> {
    let fwd = forward(model, batch, uniforms)?;
    let (b, c, d) = (batch.len(), batch.classes(), batch.features.cols());
    let m = uniforms.len();
    let scale = 1.0 / (b * m) as f64;

    let mut g_out = fwd.dec_trace.output.clone();
    for r in 0..b * m {
        let t = batch.targets.row(r % b);
        for (k, o) in g_out.row_mut(r).iter_mut().enumerate() {
            *o = (sigmoid(*o) - t[k]) * scale;
        }
    }
    let (dec_grads, dec_in_grad) = model.decoder().backward(&fwd.dec_trace, &g_out)?;

    // back through softmax and the inverse-CDF reparameterization
    let mut g_alpha = Matrix::zeros(b, c);
    for r in 0..b * m {
        let i = r % b;
        let u = &uniforms[r / b];
        let s = fwd.samples.row(r);
        let g_s = &dec_in_grad.row(r)[d..d + c];
        let dot: f64 = s.iter().zip(g_s).map(|(a, g)| a * g).sum();
        for k in 0..c {
            let g_ln = s[k] * (g_s[k] - dot);
            if g_ln != 0.0 {
                g_alpha[(i, k)] += g_ln * d_ln_icdf(u[(i, k)], fwd.alpha_hat[(i, k)]);
            }
        }
    }
    let mut kl_grad = vec![0.0; c];
    for i in 0..b {
        kl_multigamma_grad(fwd.alpha_hat.row(i), batch.prior.row(i), &mut kl_grad);
        for (g, kg) in g_alpha.row_mut(i).iter_mut().zip(&kl_grad) {
            *g += kg / b as f64;
        }
    }

    // softplus with a hard floor: zero gradient where the floor is active
    let floor = model.alpha_floor();
    let mut g_z = fwd.enc_trace.output.clone();
    for (gz, ga) in g_z.as_mut_slice().iter_mut().zip(g_alpha.as_slice()) {
        let z = *gz;
        *gz = if softplus(z) > floor { ga * sigmoid(z) } else { 0.0 };
    }
    let (enc_grads, _) = model.encoder().backward(&fwd.enc_trace, &g_z)?;
    Ok((fwd.value, enc_grads, dec_grads))
}
