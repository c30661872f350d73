use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use npc_core::classifier::{fit_classifier, predict, MlpModel};
use npc_core::data::{generate_gaussian_mixture, load_dataset, load_predictions, save_dataset, save_predictions, SyntheticSpec};
use npc_core::harness::{accuracy, confusion, disagreements, run_pipeline, venn_counts, RunConfig, CONFIG_KEYS};
use npc_core::noise::{inject_noise, true_transition, NoiseKind, NoiseOutcome, NoiseSpec};
use npc_core::npc::{calibrate, iterate_npc, NpcModel};
use npc_core::Matrix;
use npc_core::transition::{estimate_transition, save_matrix_csv, train_aux, DEFAULT_CONDITION_CAP};

#[derive(Parser)]
#[command(name = "npc", version, about = "Post-hoc calibration of predictions from classifiers trained on noisy labels")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset (NPCD).
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Corrupt the true labels of a dataset.
    InjectNoise {
        #[arg(long)]
        data: PathBuf,
        /// SN, ASN, IDN or SRIDN.
        #[arg(long)]
        kind: NoiseKind,
        #[arg(long)]
        ratio: f64,
        /// mnist, fmnist, cifar10 or `src:dst,...` (ASN only).
        #[arg(long)]
        asn_map: Option<String>,
        /// Confidences used to rank samples (SRIDN only).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write the true transition matrix as CSV.
        #[arg(long)]
        transition_out: Option<PathBuf>,
    },
    /// Train the MLP classifier on a dataset's noisy labels (or clean ones if none).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Class probabilities and embeddings from a trained classifier (NPCP).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit a calibrator on predictions for `data` (or load one) and write calibrated predictions.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Use this trained calibrator instead of fitting one.
        #[arg(long)]
        npc_model: Option<PathBuf>,
        /// Save the fitted calibrator (final round).
        #[arg(long)]
        save_model: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Recover the label transition matrix from a trained calibrator.
    EstimateT {
        /// Needs true and noisy labels.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        npc_model: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Accuracy, confusion and (with noisy labels) Venn counts, as JSON.
    Eval {
        /// Needs true labels.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        calibrated: Option<PathBuf>,
        /// List the N most confident label/calibrated-prediction disagreements.
        #[arg(long, value_name = "N")]
        disagreements: Option<usize>,
    },
    /// Run the whole experiment and write report.json.
    Pipeline {
        #[command(flatten)]
        settings: Settings,
        /// Directory for report.json, timings.json and artifacts.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Run settings: a flat `key = value` file, then `--set` overrides.
#[derive(Args)]
struct Settings {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, repeatable; see `npc pipeline --help` for keys.
    #[arg(long = "set", value_name = "KEY=VALUE", long_help = set_help())]
    set: Vec<String>,
}

fn set_help() -> String {
    format!("Override one setting (`key=value`, repeatable). Keys: {}", CONFIG_KEYS.join(", "))
}

impl Settings {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("`--set {kv}`: expected key=value"))?;
            cfg.set(k, v)?;
        }
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("stage `{name}` failed"))
}

fn write_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn rows(m: &Matrix) -> Vec<&[f64]> {
    (0..m.rows()).map(|i| m.row(i)).collect()
}

/// Error chain on one line; causes already quoted by their parent are skipped.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn gen_data(classes: usize, samples: usize, dim: usize, spread: f64, seed: u64, out: &Path) -> Result<()> {
    let spec = SyntheticSpec { classes, samples, dim, cluster_spread: spread, seed };
    let ds = stage("data", || Ok(generate_gaussian_mixture(&spec)?))?;
    stage("write", || Ok(save_dataset(&ds, out)?))?;
    info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn inject(
    data: &Path,
    kind: NoiseKind,
    ratio: f64,
    asn_map: Option<&str>,
    predictions: Option<&Path>,
    seed: u64,
    out: &Path,
    transition_out: Option<&Path>,
) -> Result<()> {
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let outcome = stage("noise", || {
        let mut spec = NoiseSpec::new(kind, ratio, seed);
        if let Some(map) = asn_map {
            let mut tmp = RunConfig::default();
            tmp.set("asn_map", map)?;
            spec.asn_map = tmp.noise.asn_map;
        } else if kind == NoiseKind::Asn {
            return Err(anyhow!("ASN noise needs --asn-map"));
        }
        let preds = predictions.map(load_predictions).transpose()?;
        Ok(inject_noise(&ds, &spec, preds.as_ref())?)
    })?;
    stage("write", || {
        if let Some(path) = transition_out {
            let t = true_transition(&outcome, ds.require_true_labels()?, ds.classes())?;
            save_matrix_csv(t.entries(), path)?;
        }
        let flips = outcome.flip_count(ds.require_true_labels()?);
        save_dataset(&ds.clone().with_noisy_labels(outcome.noisy_labels)?, out)?;
        write_json(&json!({ "samples": ds.len(), "flipped": flips, "rate": flips as f64 / ds.len() as f64 }))
    })
}

fn train(data: &Path, settings: &Settings, out: &Path) -> Result<()> {
    let cfg = settings.resolve()?;
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let (model, history) = stage("classifier", || {
        let train_cfg = npc_core::classifier::TrainConfig { seed: cfg.seed, ..cfg.classifier.clone() };
        Ok(fit_classifier(ds.features(), ds.training_labels()?, ds.classes(), &train_cfg)?)
    })?;
    stage("write", || Ok(model.save(out)?))?;
    write_json(&json!({
        "epochs": history.losses.len(),
        "final_loss": history.losses.last(),
        "best_epoch": history.best_epoch,
    }))
}

fn predict_cmd(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = stage("model", || Ok(MlpModel::load(model)?))?;
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let preds = stage("predict", || Ok(predict(&model, ds.features())?))?;
    stage("write", || Ok(save_predictions(&preds, out)?))
}

fn calibrate_cmd(
    data: &Path,
    predictions: &Path,
    npc_model: Option<&Path>,
    save_model: Option<&Path>,
    settings: &Settings,
    out: &Path,
) -> Result<()> {
    let cfg = settings.resolve()?;
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let preds = stage("predictions", || Ok(load_predictions(predictions)?))?;
    let calibrated = stage("npc", || {
        if let Some(path) = npc_model {
            let (model, _) = NpcModel::load(path)?;
            return Ok(calibrate(&model, ds.features(), &preds)?);
        }
        let npc_cfg = npc_core::npc::NpcConfig { seed: cfg.seed, ..cfg.npc.clone() };
        let mut stages = iterate_npc(ds.features(), &preds, None, &npc_cfg, cfg.iterations)?;
        let last = stages.pop().expect("at least one round");
        if let Some(path) = save_model {
            last.model.save(&npc_cfg, path)?;
        }
        Ok(last.train)
    })?;
    stage("write", || Ok(save_predictions(&calibrated, out)?))
}

fn estimate_t(data: &Path, predictions: &Path, npc_model: &Path, settings: &Settings, out: &Path) -> Result<()> {
    let cfg = settings.resolve()?;
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let preds = stage("predictions", || Ok(load_predictions(predictions)?))?;
    let (model, _) = stage("model", || Ok(NpcModel::load(npc_model)?))?;
    let est = stage("transition", || {
        let y = ds.require_true_labels()?;
        let outcome = NoiseOutcome {
            noisy_labels: ds.require_noisy_labels()?.to_vec(),
            per_instance_rows: None,
            idn_internals: None,
        };
        let truth = true_transition(&outcome, y, ds.classes())?;
        let calibrated = calibrate(&model, ds.features(), &preds)?;
        let aux_cfg = npc_core::classifier::TrainConfig { seed: cfg.seed, ..cfg.aux.clone() };
        let aux = train_aux(&ds, &preds, &aux_cfg)?;
        Ok(estimate_transition(
            ds.features(),
            &preds,
            &calibrated,
            &model,
            &aux,
            y,
            Some(&truth),
            DEFAULT_CONDITION_CAP,
        )?)
    })?;
    stage("write", || {
        save_matrix_csv(est.aggregate.entries(), out)?;
        write_json(&json!({
            "mse_vs_empirical": est.mse,
            "excluded": est.excluded,
            "exclusion_rate": est.exclusion_rate,
            "estimate": rows(est.aggregate.entries()),
        }))
    })
}

fn eval(data: &Path, predictions: &Path, calibrated: Option<&Path>, top: Option<usize>) -> Result<()> {
    let ds = stage("data", || Ok(load_dataset(data)?))?;
    let preds = stage("predictions", || Ok(load_predictions(predictions)?))?;
    let cal = stage("predictions", || Ok(calibrated.map(load_predictions).transpose()?))?;
    stage("eval", || {
        let y = ds.require_true_labels()?;
        let c = ds.classes();
        let before = preds.predicted_labels();
        let mut report = json!({
            "samples": ds.len(),
            "accuracy_before": accuracy(&before, y)?,
            "confusion_before": confusion(&before, y, c)?,
        });
        if let Some(cal) = &cal {
            let after = cal.predicted_labels();
            report["accuracy_after"] = json!(accuracy(&after, y)?);
            report["confusion_after"] = json!(confusion(&after, y, c)?);
            if let Some(noisy) = ds.noisy_labels() {
                let v = venn_counts(y, noisy, &before, &after)?;
                report["venn_counts"] = json!(v);
                report["net_gain"] = json!(v.net_gain());
            }
            if let Some(n) = top {
                let mut d = disagreements(ds.training_labels()?, cal)?;
                d.truncate(n);
                report["disagreements"] = json!(d);
            }
        } else if top.is_some() {
            return Err(anyhow!("--disagreements needs --calibrated"));
        }
        write_json(&report)
    })
}

fn pipeline(settings: &Settings, out: Option<&Path>) -> Result<()> {
    let mut cfg = settings.resolve()?;
    if let Some(dir) = out {
        cfg.output_dir = Some(dir.to_path_buf());
    }
    let report = run_pipeline(&cfg)?;
    eprintln!(
        "accuracy {:.4} -> {:.4}{}",
        report.accuracy_before,
        report.accuracy_after,
        report.t_mse.map(|m| format!(", transition mse {m:.5}")).unwrap_or_default()
    );
    if cfg.output_dir.is_none() {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", report.to_json()?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { classes, samples, dim, spread, seed, out } => gen_data(classes, samples, dim, spread, seed, &out),
        Command::InjectNoise { data, kind, ratio, asn_map, predictions, seed, out, transition_out } => inject(
            &data,
            kind,
            ratio,
            asn_map.as_deref(),
            predictions.as_deref(),
            seed,
            &out,
            transition_out.as_deref(),
        ),
        Command::Train { data, settings, out } => train(&data, &settings, &out),
        Command::Predict { model, data, out } => predict_cmd(&model, &data, &out),
        Command::Calibrate { data, predictions, npc_model, save_model, settings, out } => {
            calibrate_cmd(&data, &predictions, npc_model.as_deref(), save_model.as_deref(), &settings, &out)
        }
        Command::EstimateT { data, predictions, npc_model, settings, out } => {
            estimate_t(&data, &predictions, &npc_model, &settings, &out)
        }
        Command::Eval { data, predictions, calibrated, disagreements } => {
            eval(&data, &predictions, calibrated.as_deref(), disagreements)
        }
        Command::Pipeline { settings, out } => pipeline(&settings, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
