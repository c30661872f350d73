use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{EarlyStop, TrainConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec, CIFAR10_ASN_MAP, FMNIST_ASN_MAP, MNIST_ASN_MAP};
use crate::npc::NpcConfig;
use crate::prior::{AnchorRule, PriorVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Gaussian mixture; `seed` is replaced by one derived from the run seed.
    Synthetic(SyntheticSpec),
    /// `NPCD` files; without a test file the train file is split.
    Files { train: PathBuf, test: Option<PathBuf> },
    /// Directory holding the four standard MNIST-style IDX files.
    Idx { dir: PathBuf, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source: DataSource,
    /// Held-out share when the source has no separate test set.
    pub test_fraction: f64,
    pub normalize: bool,
    pub noise: NoiseSpec,
    pub classifier: TrainConfig,
    pub npc: NpcConfig,
    /// Calibration rounds; values above one re-apply NPC to its own output.
    pub iterations: usize,
    pub estimate_transition: bool,
    pub aux: TrainConfig,
    /// Not echoed into reports, so runs writing to different places compare equal.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec {
                classes: 4,
                samples: 5000,
                dim: 16,
                cluster_spread: 1.0,
                seed: 0,
            }),
            test_fraction: 0.2,
            normalize: false,
            noise: NoiseSpec::new(NoiseKind::Idn, 0.4, 0),
            classifier: TrainConfig::default(),
            npc: NpcConfig::default(),
            iterations: 1,
            estimate_transition: false,
            aux: TrainConfig { epochs: 20, ..TrainConfig::default() },
            output_dir: None,
            seed: 0,
        }
    }
}

/// Seeds handed to each stage, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub noise: u64,
    pub classifier: u64,
    pub npc: u64,
    pub aux: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let s = crate::RngState::new(seed);
        let pick = |id: u64| {
            use rand::RngCore;
            s.substream(id).next_u64()
        };
        Self { data: pick(1), split: pick(2), noise: pick(3), classifier: pick(4), npc: pick(5), aux: pick(6) }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_map(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    match value {
        "mnist" => return Ok(MNIST_ASN_MAP.to_vec()),
        "fmnist" => return Ok(FMNIST_ASN_MAP.to_vec()),
        "cifar10" => return Ok(CIFAR10_ASN_MAP.to_vec()),
        _ => {}
    }
    value
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("`{key}`: expected src:dst pairs, got `{pair}`")))?;
            Ok((parse(key, a.trim())?, parse(key, b.trim())?))
        })
        .collect()
}

fn parse_anchor(key: &str, value: &str) -> Result<AnchorRule> {
    let (kind, v) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected top:<fraction> or threshold:<p>")))?;
    match kind {
        "top" => Ok(AnchorRule::TopFraction(parse(key, v)?)),
        "threshold" => Ok(AnchorRule::Threshold(parse(key, v)?)),
        _ => Err(Error::Config(format!("`{key}`: unknown anchor rule `{kind}`"))),
    }
}

fn parse_variant(key: &str, value: &str) -> Result<PriorVariant> {
    match value.strip_prefix("top") {
        Some("1") => Ok(PriorVariant::Top1),
        Some(m) => Ok(PriorVariant::TopM(parse(key, m)?)),
        None => Err(Error::Config(format!("`{key}`: expected top1 or top<M>, got `{value}`"))),
    }
}

fn parse_early_stop(key: &str, value: &str) -> Result<Option<EarlyStop>> {
    if value == "none" || value == "off" {
        return Ok(None);
    }
    let (f, p) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected <val_fraction>:<patience> or none")))?;
    Ok(Some(EarlyStop { val_fraction: parse(key, f)?, patience: parse(key, p)? }))
}

fn synthetic(cfg: &mut RunConfig) -> Result<&mut SyntheticSpec> {
    match &mut cfg.source {
        DataSource::Synthetic(s) => Ok(s),
        _ => Err(Error::Config("synthetic data keys need `source = synthetic`".into())),
    }
}

/// Keys accepted by [`RunConfig::set`], for help text.
pub const CONFIG_KEYS: &[&str] = &[
    "seed", "source", "classes", "samples", "dim", "cluster_spread", "train_data", "test_data", "idx_dir",
    "test_fraction", "normalize", "noise", "noise_ratio", "asn_map", "clf_epochs", "clf_lr", "clf_batch",
    "clf_hidden", "clf_smoothing", "clf_early_stop", "prior_k", "prior_anchor", "prior_delta", "prior_rho",
    "prior_variant", "prior_space", "npc_epochs", "npc_lr", "npc_batch", "npc_mc", "npc_floor", "npc_hidden",
    "npc_soft_targets", "iterations", "estimate_t", "aux_epochs", "aux_lr", "aux_hidden", "output_dir",
];

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "source" => {
                self.source = match value {
                    "synthetic" => match &self.source {
                        DataSource::Synthetic(_) => return Ok(()),
                        _ => RunConfig::default().source,
                    },
                    "npcd" => DataSource::Files { train: PathBuf::new(), test: None },
                    "idx" => DataSource::Idx { dir: PathBuf::new(), classes: 10 },
                    _ => return Err(Error::Config(format!("unknown source `{value}` (synthetic, npcd, idx)"))),
                }
            }
            "classes" => match &mut self.source {
                DataSource::Synthetic(s) => s.classes = parse(key, value)?,
                DataSource::Idx { classes, .. } => *classes = parse(key, value)?,
                DataSource::Files { .. } => return Err(Error::Config("`classes` comes from the NPCD header".into())),
            },
            "samples" => synthetic(self)?.samples = parse(key, value)?,
            "dim" => synthetic(self)?.dim = parse(key, value)?,
            "cluster_spread" => synthetic(self)?.cluster_spread = parse(key, value)?,
            "train_data" | "test_data" => {
                if !matches!(self.source, DataSource::Files { .. }) {
                    self.source = DataSource::Files { train: PathBuf::new(), test: None };
                }
                if let DataSource::Files { train, test } = &mut self.source {
                    if key == "train_data" {
                        *train = PathBuf::from(value);
                    } else {
                        *test = Some(PathBuf::from(value));
                    }
                }
            }
            "idx_dir" => {
                let classes = match self.source {
                    DataSource::Idx { classes, .. } => classes,
                    _ => 10,
                };
                self.source = DataSource::Idx { dir: PathBuf::from(value), classes };
            }
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "noise" => {
                self.noise.kind = parse(key, value)?;
                if self.noise.kind != NoiseKind::Asn {
                    self.noise.asn_map = None;
                } else if self.noise.asn_map.is_none() {
                    self.noise.asn_map = Some(MNIST_ASN_MAP.to_vec());
                }
            }
            "noise_ratio" => self.noise.ratio = parse(key, value)?,
            "asn_map" => self.noise.asn_map = Some(parse_map(key, value)?),
            "clf_epochs" => self.classifier.epochs = parse(key, value)?,
            "clf_lr" => self.classifier.learning_rate = parse(key, value)?,
            "clf_batch" => self.classifier.batch_size = parse(key, value)?,
            "clf_hidden" => self.classifier.hidden = parse_list(key, value)?,
            "clf_smoothing" => self.classifier.smoothing = parse(key, value)?,
            "clf_early_stop" => self.classifier.early_stop = parse_early_stop(key, value)?,
            "prior_k" => self.npc.prior.k = parse(key, value)?,
            "prior_anchor" => self.npc.prior.anchor_rule = parse_anchor(key, value)?,
            "prior_delta" => self.npc.prior.delta = parse(key, value)?,
            "prior_rho" => self.npc.prior.rho = parse(key, value)?,
            "prior_variant" => self.npc.prior.variant = parse_variant(key, value)?,
            "prior_space" => self.npc.prior.feature_space = parse(key, value)?,
            "npc_epochs" => self.npc.epochs = parse(key, value)?,
            "npc_lr" => self.npc.learning_rate = parse(key, value)?,
            "npc_batch" => self.npc.batch_size = parse(key, value)?,
            "npc_mc" => self.npc.mc_samples = parse(key, value)?,
            "npc_floor" => self.npc.alpha_floor = parse(key, value)?,
            "npc_hidden" => self.npc.hidden = parse_list(key, value)?,
            "npc_soft_targets" => self.npc.soft_targets = parse_bool(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "estimate_t" => self.estimate_transition = parse_bool(key, value)?,
            "aux_epochs" => self.aux.epochs = parse(key, value)?,
            "aux_lr" => self.aux.learning_rate = parse(key, value)?,
            "aux_hidden" => self.aux.hidden = parse_list(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text (`#` starts a comment) over `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Files { train, .. } if train.as_os_str().is_empty() => {
                return Err(Error::Config("`train_data` is required for NPCD input".into()));
            }
            DataSource::Idx { dir, classes } => {
                if dir.as_os_str().is_empty() || *classes < 2 {
                    return Err(Error::Config("`idx_dir` and at least two classes are required".into()));
                }
            }
            DataSource::Files { .. } => {}
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0,1), got {}", self.test_fraction)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        self.classifier.validate()?;
        self.aux.validate()?;
        if let Some(c) = self.known_classes() {
            self.noise.validate(c)?;
            self.npc.validate(c)?;
        }
        Ok(())
    }

    fn known_classes(&self) -> Option<usize> {
        match &self.source {
            DataSource::Synthetic(s) => Some(s.classes),
            DataSource::Idx { classes, .. } => Some(*classes),
            DataSource::Files { .. } => None,
        }
    }
}
