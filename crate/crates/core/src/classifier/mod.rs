//! Baseline MLP classifier: plain cross-entropy, label smoothing and early
//! stopping variants, producing the frozen `p(ŷ | x)` that calibration consumes.

mod mlp;
mod train;

pub use mlp::{Adam, Dense, Gradients, MlpModel, Trace};
pub use train::{fit_classifier, predict, smoothed_targets, train_classifier, EarlyStop, TrainConfig, TrainHistory};

pub(crate) use train::fit_softmax;
