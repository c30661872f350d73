use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig, StageSeeds};
use super::metrics::{accuracy, confusion, venn_counts, VennCounts};
use crate::classifier::{fit_classifier, predict, TrainConfig};
use crate::data::{
    generate_gaussian_mixture, load_dataset, load_idx_dataset, save_predictions, train_test_split, Dataset,
    PredictionSet,
};
use crate::error::{Error, Result};
use crate::mathcore::Matrix;
use crate::noise::{inject_noise, true_transition, NoiseKind, TransitionMatrix};
use crate::npc::{iterate_npc, NpcConfig};
use crate::transition::{estimate_transition, save_matrix_csv, train_aux, DEFAULT_CONDITION_CAP};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub stages: Vec<StageTime>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub estimated: Matrix,
    pub truth: Matrix,
    pub diagonal_mean: f64,
    pub excluded: usize,
    pub exclusion_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Fraction of training labels that differ from the true labels.
    pub observed_noise_rate: Option<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Rows: true class; columns: classifier prediction.
    pub confusion_before: Vec<Vec<u64>>,
    /// Rows: true class; columns: calibrated prediction.
    pub confusion_after: Vec<Vec<u64>>,
    /// Training-split regions; absent when training labels are not known.
    pub venn_counts: Option<VennCounts>,
    pub net_gain: Option<i64>,
    /// Test accuracy after each calibration round.
    pub iteration_accuracies: Vec<f64>,
    pub t_mse: Option<f64>,
    pub transition: Option<TransitionSummary>,
    pub seeds: StageSeeds,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_times: Option<StageTimes>,
}

impl EvalReport {
    /// The report as written to disk: everything except wall times.
    pub fn without_times(&self) -> Self {
        Self { wall_times: None, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.without_times())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Write `report.json` (deterministic) and, when present, `timings.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), self.to_json()? + "\n")?;
        if let Some(t) = &self.wall_times {
            std::fs::write(dir.join(TIMINGS_FILE), serde_json::to_string_pretty(t)? + "\n")?;
        }
        Ok(())
    }
}

struct Stopwatch {
    start: Instant,
    stages: Vec<StageTime>,
}

impl Stopwatch {
    fn new() -> Self {
        Self { start: Instant::now(), stages: Vec::new() }
    }

    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| Error::Stage { stage, source: Box::new(e) });
        let seconds = t.elapsed().as_secs_f64().max(1e-9);
        info!("stage {stage}: {seconds:.3}s");
        self.stages.push(StageTime { stage: stage.to_string(), seconds });
        out
    }

    fn finish(self) -> StageTimes {
        StageTimes { total_seconds: self.start.elapsed().as_secs_f64(), stages: self.stages }
    }
}

/// Min-max ranges fitted on `train` and applied to both sets.
fn normalize_pair(train: &mut Matrix, test: &mut Matrix) {
    for j in 0..train.cols() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..train.rows() {
            lo = lo.min(train[(i, j)]);
            hi = hi.max(train[(i, j)]);
        }
        let span = hi - lo;
        for m in [&mut *train, &mut *test] {
            for i in 0..m.rows() {
                m[(i, j)] = if span > 0.0 { (m[(i, j)] - lo) / span } else { 0.0 };
            }
        }
    }
}

fn load_data(cfg: &RunConfig, seeds: &StageSeeds) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.source {
        DataSource::Synthetic(spec) => {
            let spec = crate::data::SyntheticSpec { seed: seeds.data, ..spec.clone() };
            train_test_split(&generate_gaussian_mixture(&spec)?, cfg.test_fraction, seeds.split)?
        }
        DataSource::Files { train, test: Some(test) } => (load_dataset(train)?, load_dataset(test)?),
        DataSource::Files { train, test: None } => train_test_split(&load_dataset(train)?, cfg.test_fraction, seeds.split)?,
        DataSource::Idx { dir, classes } => (
            load_idx_dataset(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"), *classes)?,
            load_idx_dataset(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), *classes)?,
        ),
    };
    if train.classes() != test.classes() || train.dim() != test.dim() {
        return Err(Error::shape("train and test sets disagree on classes or dimension"));
    }
    test.require_true_labels()?;
    if !cfg.normalize {
        return Ok((train, test));
    }
    let (mut xtr, mut xte) = (train.features().clone(), test.features().clone());
    normalize_pair(&mut xtr, &mut xte);
    let rebuild = |ds: &Dataset, x: Matrix| {
        Dataset::new(x, ds.classes(), ds.true_labels().map(<[usize]>::to_vec), ds.noisy_labels().map(<[usize]>::to_vec))
    };
    Ok((rebuild(&train, xtr)?, rebuild(&test, xte)?))
}

/// Everything the pipeline produces besides the report.
pub struct PipelineArtifacts {
    pub train: Dataset,
    pub test: Dataset,
    pub train_predictions: PredictionSet,
    pub test_predictions: PredictionSet,
    pub calibrated_train: PredictionSet,
    pub calibrated_test: PredictionSet,
    pub true_transition: Option<TransitionMatrix>,
}

/// Data → noise → classifier → predictions → priors and NPC → calibration →
/// optional transition estimate → report. Deterministic given `cfg.seed`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalReport> {
    let (report, artifacts) = run_pipeline_with_artifacts(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(&report, &artifacts, dir)?;
    }
    Ok(report)
}

pub fn run_pipeline_with_artifacts(cfg: &RunConfig) -> Result<(EvalReport, PipelineArtifacts)> {
    cfg.validate().map_err(|e| Error::Stage { stage: "config", source: Box::new(e) })?;
    let seeds = StageSeeds::derive(cfg.seed);
    let mut watch = Stopwatch::new();

    let (mut train, test) = watch.run("data", || load_data(cfg, &seeds))?;
    let c = train.classes();
    let clf_cfg = TrainConfig { seed: seeds.classifier, ..cfg.classifier.clone() };

    let mut truth_t = None;
    if train.noisy_labels().is_none() {
        let outcome = watch.run("noise", || {
            let spec = crate::noise::NoiseSpec { seed: seeds.noise, ..cfg.noise.clone() };
            let clean_preds = if spec.kind == NoiseKind::Sridn {
                let (clean, _) = fit_classifier(train.features(), train.require_true_labels()?, c, &clf_cfg)?;
                Some(predict(&clean, train.features())?)
            } else {
                None
            };
            inject_noise(&train, &spec, clean_preds.as_ref())
        })?;
        truth_t = Some(true_transition(&outcome, train.require_true_labels()?, c)?);
        train = train.with_noisy_labels(outcome.noisy_labels)?;
    } else if let Some(y) = train.true_labels() {
        let labels = train.noisy_labels().expect("checked").to_vec();
        let outcome = crate::noise::NoiseOutcome { noisy_labels: labels, per_instance_rows: None, idn_internals: None };
        truth_t = Some(true_transition(&outcome, y, c)?);
    }

    let model = watch.run("classifier", || {
        Ok(fit_classifier(train.features(), train.require_noisy_labels()?, c, &clf_cfg)?.0)
    })?;
    let (train_preds, test_preds) =
        watch.run("predict", || Ok((predict(&model, train.features())?, predict(&model, test.features())?)))?;

    let npc_cfg = NpcConfig { seed: seeds.npc, ..cfg.npc.clone() };
    let stages = watch.run("npc", || {
        iterate_npc(train.features(), &train_preds, Some((test.features(), &test_preds)), &npc_cfg, cfg.iterations)
    })?;

    let transition = if cfg.estimate_transition {
        Some(watch.run("transition", || {
            let y = train.require_true_labels()?;
            let aux_cfg = TrainConfig { seed: seeds.aux, ..cfg.aux.clone() };
            let aux = train_aux(&train, &train_preds, &aux_cfg)?;
            estimate_transition(
                train.features(),
                &train_preds,
                &stages[0].train,
                &stages[0].model,
                &aux,
                y,
                truth_t.as_ref(),
                DEFAULT_CONDITION_CAP,
            )
        })?)
    } else {
        None
    };

    let report = watch.run("report", || {
        let y_test = test.require_true_labels()?;
        let before = test_preds.predicted_labels();
        let last = stages.last().expect("at least one round");
        let calibrated_test = last.eval.as_ref().expect("eval set calibrated");
        let after = calibrated_test.predicted_labels();
        let iteration_accuracies = stages
            .iter()
            .map(|s| accuracy(&s.eval.as_ref().expect("eval set calibrated").predicted_labels(), y_test))
            .collect::<Result<Vec<_>>>()?;
        let venn = match train.true_labels() {
            Some(y) => Some(venn_counts(
                y,
                train.require_noisy_labels()?,
                &train_preds.predicted_labels(),
                &last.train.predicted_labels(),
            )?),
            None => None,
        };
        let observed_noise_rate = train.true_labels().map(|y| {
            let noisy = train.noisy_labels().expect("noisy labels set");
            y.iter().zip(noisy).filter(|(a, b)| a != b).count() as f64 / y.len() as f64
        });
        let summary = match (&transition, &truth_t) {
            (Some(est), Some(truth)) => {
                let e = est.aggregate.entries();
                Some(TransitionSummary {
                    estimated: e.clone(),
                    truth: truth.entries().clone(),
                    diagonal_mean: (0..c).map(|i| e[(i, i)]).sum::<f64>() / c as f64,
                    excluded: est.excluded,
                    exclusion_rate: est.exclusion_rate,
                })
            }
            _ => None,
        };
        let mut echo = cfg.clone();
        if let DataSource::Synthetic(s) = &mut echo.source {
            s.seed = seeds.data;
        }
        echo.noise.seed = seeds.noise;
        echo.classifier.seed = seeds.classifier;
        echo.npc.seed = seeds.npc;
        echo.aux.seed = seeds.aux;
        Ok(EvalReport {
            classes: c,
            train_size: train.len(),
            test_size: test.len(),
            observed_noise_rate,
            accuracy_before: accuracy(&before, y_test)?,
            accuracy_after: accuracy(&after, y_test)?,
            confusion_before: confusion(&before, y_test, c)?,
            confusion_after: confusion(&after, y_test, c)?,
            net_gain: venn.map(|v| v.net_gain()),
            venn_counts: venn,
            iteration_accuracies,
            t_mse: transition.as_ref().and_then(|t| t.mse),
            transition: summary,
            seeds,
            config: echo,
            wall_times: None,
        })
    })?;

    let mut report = report;
    report.wall_times = Some(watch.finish());
    let last = stages.into_iter().last().expect("at least one round");
    let artifacts = PipelineArtifacts {
        train,
        test,
        train_predictions: train_preds,
        test_predictions: test_preds,
        calibrated_train: last.train,
        calibrated_test: last.eval.expect("eval set calibrated"),
        true_transition: truth_t,
    };
    Ok((report, artifacts))
}

/// Report, timings, test-set predictions before/after calibration, and the
/// transition matrices as CSV when estimated.
pub fn write_artifacts(report: &EvalReport, artifacts: &PipelineArtifacts, dir: &Path) -> Result<()> {
    report.write(dir)?;
    save_predictions(&artifacts.test_predictions, dir.join("test_predictions.npcp"))?;
    save_predictions(&artifacts.calibrated_test, dir.join("calibrated_test.npcp"))?;
    if let Some(t) = &report.transition {
        save_matrix_csv(&t.estimated, dir.join("t_estimated.csv"))?;
        save_matrix_csv(&t.truth, dir.join("t_true.csv"))?;
    }
    Ok(())
}
