//! Numerical substrate: dense matrices, special functions, the seeded random
//! stream, and Dirichlet reparameterized sampling.

mod dirichlet;
mod matrix;
mod rng;
mod special;

pub use dirichlet::{
    dirichlet_from_uniforms, dirichlet_sample, gamma_icdf_approx, gamma_icdf_approx_dalpha,
    kl_multigamma, softmax, DirichletParams,
};
pub use matrix::{argmax, Matrix};
pub use rng::RngState;
pub use special::{digamma, log_gamma, trigamma};

pub(crate) use dirichlet::{d_ln_icdf, kl_multigamma_grad, kl_multigamma_raw, ln_icdf, softmax_in_place};
