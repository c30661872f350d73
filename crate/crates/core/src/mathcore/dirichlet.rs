//! Dirichlet sampling through normalized gamma variables, and the closed-form
//! KL between two gamma products sharing rate 1.

use serde::{Deserialize, Serialize};

use super::rng::RngState;
use super::special::{ln_gamma, psi, psi1};
use crate::error::{Error, Result};

/// Positive concentration vector over `c` classes. The gamma rate is fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams(Vec<f64>);

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::shape("Dirichlet parameters must be non-empty"));
        }
        if let Some((k, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !a.is_finite() || **a <= 0.0)
        {
            return Err(Error::domain(
                "DirichletParams::new",
                format!("alpha[{k}] = {a} is not a finite positive value"),
            ));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(c: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for DirichletParams {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Approximate inverse CDF of Gamma(alpha, 1): `(u · alpha · Γ(alpha))^(1/alpha)`.
///
/// Exact as alpha → 0; biased low for large alpha.
pub fn gamma_icdf_approx(u: f64, alpha: f64) -> Result<f64> {
    check_icdf_args(u, alpha)?;
    Ok(ln_icdf(u, alpha).exp())
}

/// Derivative of [`gamma_icdf_approx`] with respect to `alpha`.
pub fn gamma_icdf_approx_dalpha(u: f64, alpha: f64) -> Result<f64> {
    check_icdf_args(u, alpha)?;
    Ok(ln_icdf(u, alpha).exp() * d_ln_icdf(u, alpha))
}

fn check_icdf_args(u: f64, alpha: f64) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain("gamma_icdf_approx", format!("u must lie in (0,1), got {u}")));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::domain("gamma_icdf_approx", format!("alpha must be > 0, got {alpha}")));
    }
    Ok(())
}

/// ln of the approximate inverse CDF; kept in log space to survive small alpha.
#[inline]
pub(crate) fn ln_icdf(u: f64, alpha: f64) -> f64 {
    (u.ln() + alpha.ln() + ln_gamma(alpha)) / alpha
}

/// d/dalpha of [`ln_icdf`].
#[inline]
pub(crate) fn d_ln_icdf(u: f64, alpha: f64) -> f64 {
    let inner = u.ln() + alpha.ln() + ln_gamma(alpha);
    -inner / (alpha * alpha) + (1.0 / alpha + psi(alpha)) / alpha
}

/// Draw from Dir(alpha) using fresh uniforms from `rng`.
pub fn dirichlet_sample(alpha: &DirichletParams, rng: &mut RngState) -> Vec<f64> {
    let noise: Vec<f64> = (0..alpha.len()).map(|_| rng.uniform_open()).collect();
    dirichlet_from_uniforms(alpha, &noise).expect("uniforms drawn from the open interval")
}

/// Deterministic part of [`dirichlet_sample`]: `z_k = icdf(u_k, alpha_k)`, `y = z / Σz`.
pub fn dirichlet_from_uniforms(alpha: &DirichletParams, uniforms: &[f64]) -> Result<Vec<f64>> {
    if uniforms.len() != alpha.len() {
        return Err(Error::shape(format!(
            "{} uniforms for {} concentration components",
            uniforms.len(),
            alpha.len()
        )));
    }
    let mut log_z = Vec::with_capacity(alpha.len());
    for (&u, &a) in uniforms.iter().zip(alpha.as_slice()) {
        check_icdf_args(u, a)?;
        log_z.push(ln_icdf(u, a));
    }
    softmax_in_place(&mut log_z);
    Ok(log_z)
}

/// KL(MultiGamma(alpha_hat, 1) ‖ MultiGamma(alpha, 1)).
pub fn kl_multigamma(alpha_hat: &DirichletParams, alpha: &DirichletParams) -> Result<f64> {
    if alpha_hat.len() != alpha.len() {
        return Err(Error::shape(format!(
            "KL between {}- and {}-component parameters",
            alpha_hat.len(),
            alpha.len()
        )));
    }
    Ok(kl_multigamma_raw(alpha_hat.as_slice(), alpha.as_slice()))
}

pub(crate) fn kl_multigamma_raw(alpha_hat: &[f64], alpha: &[f64]) -> f64 {
    alpha_hat
        .iter()
        .zip(alpha)
        .map(|(&ah, &a)| ln_gamma(a) - ln_gamma(ah) + (ah - a) * psi(ah))
        .sum()
}

/// Gradient of the MultiGamma KL with respect to `alpha_hat`: `(α̂ − α) ψ'(α̂)`.
pub(crate) fn kl_multigamma_grad(alpha_hat: &[f64], alpha: &[f64], out: &mut [f64]) {
    for ((g, &ah), &a) in out.iter_mut().zip(alpha_hat).zip(alpha) {
        *g = (ah - a) * psi1(ah);
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::domain("softmax", "input contains NaN or +inf"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Entries equal to -inf map to exactly 0.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn dp(v: &[f64]) -> DirichletParams {
        DirichletParams::new(v.to_vec()).unwrap()
    }

    #[test]
    fn icdf_examples() {
        assert!((gamma_icdf_approx(0.5, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((gamma_icdf_approx(0.5, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let want = (0.2 * 0.5 * std::f64::consts::PI.sqrt()).powi(2);
        assert!((gamma_icdf_approx(0.2, 0.5).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.031_416).abs() < 1e-5);
    }

    #[test]
    fn icdf_domain_errors() {
        assert!(gamma_icdf_approx(0.0, 1.0).is_err());
        assert!(gamma_icdf_approx(1.0, 1.0).is_err());
        assert!(gamma_icdf_approx(0.5, 0.0).is_err());
        assert!(gamma_icdf_approx(0.5, -3.0).is_err());
    }

    #[test]
    fn icdf_derivative_matches_central_differences() {
        let h = 1e-6;
        for &u in &[0.05, 0.3, 0.5, 0.77, 0.95] {
            let mut a = 0.3;
            while a <= 20.0 {
                let fd = (gamma_icdf_approx(u, a + h).unwrap() - gamma_icdf_approx(u, a - h).unwrap())
                    / (2.0 * h);
                let an = gamma_icdf_approx_dalpha(u, a).unwrap();
                let rel = (fd - an).abs() / an.abs().max(1e-12);
                assert!(rel < 1e-5, "u={u} a={a} fd={fd} an={an} rel={rel}");
                a *= 1.37;
            }
        }
    }

    #[test]
    fn dirichlet_examples() {
        let y = dirichlet_from_uniforms(&dp(&[1.0, 1.0]), &[0.5, 0.5]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
        let y = dirichlet_from_uniforms(&dp(&[2.0, 2.0]), &[0.5, 0.5]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        let y = dirichlet_from_uniforms(&dp(&[2.0, 1.0]), &[0.5, 0.5]).unwrap();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-12 && (y[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_multigamma(&dp(&[1.0, 1.0]), &dp(&[1.0, 1.0])).unwrap(), 0.0);
        let kl = kl_multigamma(&dp(&[2.0, 2.0]), &dp(&[1.0, 1.0])).unwrap();
        assert!((kl - 2.0 * (1.0 - EULER_GAMMA)).abs() < 1e-12);
        assert!((kl - 0.845_568_7).abs() < 1e-7);
        let kl = kl_multigamma(&dp(&[1.0, 1.0]), &dp(&[2.0, 2.0])).unwrap();
        assert!((kl - 2.0 * EULER_GAMMA).abs() < 1e-12);
        assert!((kl - 1.154_431_3).abs() < 1e-7);
        assert!(kl_multigamma(&dp(&[1.0]), &dp(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let a = [1.0, 11.0, 0.7];
        let ah = [2.3, 4.1, 0.9];
        let mut g = [0.0; 3];
        kl_multigamma_grad(&ah, &a, &mut g);
        for k in 0..3 {
            let h = 1e-6;
            let mut p = ah;
            let mut m = ah;
            p[k] += h;
            m[k] -= h;
            let fd = (kl_multigamma_raw(&p, &a) - kl_multigamma_raw(&m, &a)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g[k].abs().max(1.0));
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        assert!(softmax(&[]).is_err());
        let s = softmax(&[f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn params_validation() {
        assert!(DirichletParams::new(vec![]).is_err());
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn icdf_strictly_increasing_in_u(u1 in 0.001f64..0.998, gap in 1e-4f64..0.5, a in 0.05f64..30.0) {
            let u2 = (u1 + gap).min(0.9999);
            prop_assume!(u2 > u1);
            prop_assert!(gamma_icdf_approx(u1, a).unwrap() < gamma_icdf_approx(u2, a).unwrap());
        }

        #[test]
        fn kl_zero_on_diagonal_and_nonnegative(
            a in proptest::collection::vec(0.05f64..50.0, 1..8),
            b in proptest::collection::vec(0.05f64..50.0, 8),
        ) {
            let pa = dp(&a);
            prop_assert_eq!(kl_multigamma(&pa, &pa).unwrap(), 0.0);
            let pb = dp(&b[..a.len()]);
            prop_assert!(kl_multigamma(&pa, &pb).unwrap() >= -1e-12);
        }

        #[test]
        fn dirichlet_samples_lie_on_simplex(
            a in proptest::collection::vec(0.01f64..40.0, 2..10),
            seed in any::<u64>(),
        ) {
            let mut rng = RngState::new(seed);
            let y = dirichlet_sample(&dp(&a), &mut rng);
            let total: f64 = y.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn dirichlet_stream_is_reproducible() {
        let alpha = dp(&[0.5, 3.0, 9.0]);
        let mut r1 = RngState::new(123);
        let mut r2 = RngState::new(123);
        for _ in 0..50 {
            let a = dirichlet_sample(&alpha, &mut r1);
            let b = dirichlet_sample(&alpha, &mut r2);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
