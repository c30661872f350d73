//! Noisy prediction calibration.
//!
//! A classifier trained on corrupted labels produces predictions `ŷ`. This crate
//! learns, after the fact and without touching the classifier, a per-instance
//! matrix `H(x)[k][j] = p(y = j | ŷ = k, x)` with a Dirichlet-latent variational
//! model, and uses it to turn `p(ŷ | x)` into `p(y | x)`.
//!
//! The surrounding experimental kit is included: synthetic data, the four label
//! corruption generators, a small MLP baseline, transition-matrix recovery and
//! evaluation reports.

pub mod classifier;
pub mod data;
pub mod error;
pub mod harness;
pub mod mathcore;
pub mod noise;
pub mod npc;
pub mod prior;
pub mod transition;

pub use error::{Error, Result};
pub use mathcore::{DirichletParams, Matrix, RngState};
