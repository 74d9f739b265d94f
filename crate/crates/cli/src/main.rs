//! `seqcrc`: calibrate, apply and evaluate conformal prediction sets for
//! object detectors, and check the guarantee on synthetic data.

mod config;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use seqcrc::dataio::{write_json, DatasetFile};
use seqcrc::{
    calibrate, config_digest, ensure_config_matches, evaluate, import_coco, infer, load_dataset,
    load_result, monte_carlo_validate, save_result, CalibrationConfig, CalibrationResult,
    ImageSample, LocalizationSet,
};

use config::{effective_config, CalibrationFlags, CliConfigFile};
use table::Table;

#[derive(Debug)]
pub enum CliError {
    Core(seqcrc::Error),
    Config(String),
    Violation(String),
}

impl From<seqcrc::Error> for CliError {
    fn from(e: seqcrc::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn root(e: &seqcrc::Error) -> &seqcrc::Error {
        match e {
            seqcrc::Error::Trial { source, .. } => Self::root(source),
            other => other,
        }
    }

    /// `(exit code, kind)`.
    fn classify(&self) -> (u8, &'static str) {
        use seqcrc::Error as E;
        match self {
            CliError::Config(_) => (1, "config"),
            CliError::Violation(_) => (5, "guarantee_violation"),
            CliError::Core(e) => match Self::root(e) {
                E::Precondition { .. } => (2, "precondition"),
                E::Step2Infeasible { .. } => (3, "step2_infeasible"),
                E::InfeasibleAlpha { .. } => (3, "infeasible_alpha"),
                E::DigestMismatch { .. } => (4, "digest_mismatch"),
                E::Io { .. } => (1, "io"),
                E::Parse { .. } => (1, "parse"),
                E::Schema { .. } | E::UnknownCategory { .. } | E::ClassOutOfRange { .. } => {
                    (1, "schema")
                }
                E::VersionMismatch { .. } => (1, "version"),
                E::EmptyCalibrationSet | E::EmptyTestSet => (1, "empty_input"),
                _ => (1, "invalid_input"),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Config(m) | CliError::Violation(m) => m.clone(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "seqcrc",
    version,
    about = "Sequential conformal risk control for object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate the three parameters on a calibration dataset.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: CalibrationFlags,
    },
    /// Apply a calibration result to every image of a dataset.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: CalibrationFlags,
    },
    /// Report test risks and set sizes of a calibration result.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: CalibrationFlags,
    },
    /// Convert COCO annotations and detection results to the native format.
    ImportCoco {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo check of the risk guarantee on synthetic data.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n_cal: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Allowed excess of each mean risk over its level.
        #[arg(long)]
        slack: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: CalibrationFlags,
    },
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Config(format!("no {what} path given (flag or config file)")))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt)
}

fn lambda_table(r: &CalibrationResult<f64>) -> Table {
    let mut t = Table::new(["parameter", "value"]);
    t.row(["lambda_cnf_plus", &fmt(r.lambda_cnf_plus)]);
    t.row(["lambda_cnf_minus", &fmt(r.lambda_cnf_minus)]);
    t.row(["lambda_loc_plus", &fmt(r.lambda_loc_plus)]);
    t.row(["lambda_cls_plus", &fmt(r.lambda_cls_plus)]);
    t
}

/// Effective config for `infer`/`evaluate`, or `None` when the caller gave
/// no calibration settings to check against.
fn supplied_config(
    file: &CliConfigFile,
    flags: &CalibrationFlags,
    result: &CalibrationResult<f64>,
) -> Result<Option<CalibrationConfig<f64>>, CliError> {
    if file.calibration.is_none() && flags.is_empty() {
        return Ok(None);
    }
    let upper = result.config.lambda_loc_bounds.upper;
    effective_config(file.calibration.as_ref(), flags, |_| upper).map(Some)
}

/// Loads a result and, when settings were supplied, refuses it unless it
/// was produced with exactly those settings.
fn checked_result(
    file: &CliConfigFile,
    result_path: Option<PathBuf>,
    flags: &CalibrationFlags,
) -> Result<CalibrationResult<f64>, CliError> {
    let path = required(result_path.or_else(|| file.result.clone()), "result")?;
    let result = load_result::<f64>(&path)?;
    if let Some(cfg) = supplied_config(file, flags, &result)? {
        ensure_config_matches(&result, &cfg)?;
    }
    Ok(result)
}

#[derive(Serialize)]
struct Artifact<'a, P: Serialize> {
    config: &'a CalibrationConfig<f64>,
    config_digest: String,
    lambda_cnf_plus: f64,
    lambda_loc_plus: f64,
    lambda_cls_plus: f64,
    #[serde(flatten)]
    payload: P,
}

fn artifact<P: Serialize>(result: &CalibrationResult<f64>, payload: P) -> Artifact<'_, P> {
    Artifact {
        config: &result.config,
        config_digest: config_digest(&result.config),
        lambda_cnf_plus: result.lambda_cnf_plus,
        lambda_loc_plus: result.lambda_loc_plus,
        lambda_cls_plus: result.lambda_cls_plus,
        payload,
    }
}

fn cmd_calibrate(
    config: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    flags: CalibrationFlags,
) -> Result<(), CliError> {
    let file = CliConfigFile::load(config.as_deref())?;
    let dataset = required(dataset.or(file.dataset.clone()), "dataset")?;
    let out = required(out.or(file.out.clone()), "output")?;

    // The prefilter may itself come from the settings, so load raw first
    // and prefilter once the effective config is known.
    let raw = load_dataset::<f64>(&dataset, 0.0)?;
    let cfg = effective_config(file.calibration.as_ref(), &flags, |kind| {
        kind.default_upper_bound(&raw)
    })?;
    let samples: Vec<ImageSample<f64>> = raw
        .into_iter()
        .map(|mut s| {
            s.detections
                .retain(|d| d.confidence >= cfg.prefilter_threshold);
            s
        })
        .collect();
    log::info!(
        "calibrating on {} images from {}",
        samples.len(),
        dataset.display()
    );
    let result = calibrate(&samples, &cfg)?;
    save_result(&result, &out)?;

    let mut t = lambda_table(&result);
    t.row(["cnf_risk (calibration)", &fmt(result.diagnostics.cnf_risk)]);
    t.row(["loc_risk (calibration)", &fmt(result.diagnostics.loc_risk)]);
    t.row(["cls_risk (calibration)", &fmt(result.diagnostics.cls_risk)]);
    t.row(["sweep_points", &result.diagnostics.sweep_points.to_string()]);
    t.row(["n_calibration", &result.n_calibration.to_string()]);
    print!("{t}");
    println!("result written to {}", out.display());
    Ok(())
}

fn cmd_infer(
    config: Option<PathBuf>,
    result: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    flags: CalibrationFlags,
) -> Result<(), CliError> {
    let file = CliConfigFile::load(config.as_deref())?;
    let result = checked_result(&file, result, &flags)?;
    let dataset = required(dataset.or(file.dataset.clone()), "dataset")?;
    let out = required(out.or(file.out.clone()), "output")?;
    let samples = load_dataset::<f64>(&dataset, result.config.prefilter_threshold)?;
    let predictions: Vec<_> = samples.iter().map(|s| infer(s, &result)).collect();
    let selected: usize = predictions.iter().map(|p| p.selected.len()).sum();
    write_json(
        &out,
        &artifact(&result, json!({ "predictions": predictions })),
    )?;

    print!("{}", lambda_table(&result));
    println!(
        "{} images, {} selected boxes; predictions written to {}",
        predictions.len(),
        selected,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    config: Option<PathBuf>,
    result: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    flags: CalibrationFlags,
) -> Result<(), CliError> {
    let file = CliConfigFile::load(config.as_deref())?;
    let result = checked_result(&file, result, &flags)?;
    let dataset = required(dataset.or(file.dataset.clone()), "dataset")?;
    let samples = load_dataset::<f64>(&dataset, result.config.prefilter_threshold)?;
    let report = evaluate(&samples, &result)?;

    let cfg = &result.config;
    let mut t = Table::new(["metric", "value", "target"]);
    t.row(["cnf_risk", &fmt(report.cnf_risk), &fmt(cfg.alpha_cnf)]);
    t.row(["loc_risk", &fmt(report.loc_risk), &fmt(cfg.alpha_loc)]);
    t.row(["cls_risk", &fmt(report.cls_risk), &fmt(cfg.alpha_cls)]);
    t.row([
        "global_risk",
        &fmt(report.global_risk),
        &fmt(cfg.alpha_loc + cfg.alpha_cls),
    ]);
    t.row(["cnf_set_size", &fmt(report.cnf_set_size), ""]);
    t.row(["loc_set_size", &fmt_opt(report.loc_set_size), ""]);
    t.row(["cls_set_size", &fmt_opt(report.cls_set_size), ""]);
    t.row(["n_test", &report.n_test.to_string(), ""]);
    t.row([
        "images_without_selection",
        &report.images_without_selection.to_string(),
        "",
    ]);
    print!("{t}");

    if let Some(out) = out.or(file.out.clone()) {
        write_json(&out, &artifact(&result, json!({ "report": report })))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_import_coco(gt: &Path, detections: &Path, out: &Path) -> Result<(), CliError> {
    let imported = import_coco::<f64>(gt, detections)?;
    let ds: &DatasetFile<f64> = &imported.dataset;
    ds.validate()?;
    ds.write(out)?;
    if imported.synthesized_probability_vectors > 0 {
        eprintln!(
            "WARNING: {} detections had no class-score vector; near one-hot vectors were synthesized and label sets built from them are degenerate",
            imported.synthesized_probability_vectors
        );
    }
    let objects: usize = ds.images.iter().map(|i| i.ground_truths.len()).sum();
    let dets: usize = ds.images.iter().map(|i| i.detections.len()).sum();
    let mut t = Table::new(["field", "value"]);
    t.row(["images", &ds.images.len().to_string()]);
    t.row(["classes", &ds.num_classes.to_string()]);
    t.row(["ground_truths", &objects.to_string()]);
    t.row(["detections", &dets.to_string()]);
    t.row([
        "synthesized_probability_vectors",
        &imported.synthesized_probability_vectors.to_string(),
    ]);
    print!("{t}");
    println!("dataset written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    config: Option<PathBuf>,
    seed: Option<u64>,
    trials: Option<usize>,
    n_cal: Option<usize>,
    n_test: Option<usize>,
    slack: Option<f64>,
    out: Option<PathBuf>,
    flags: CalibrationFlags,
) -> Result<(), CliError> {
    let file = CliConfigFile::load(config.as_deref())?;
    let mut spec = file.synth.clone().unwrap_or_default();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let trials = trials.or(file.validate.trials).unwrap_or(100);
    let n_cal = n_cal.or(file.validate.n_cal).unwrap_or(500);
    let n_test = n_test.or(file.validate.n_test).unwrap_or(500);
    let slack = slack.or(file.validate.slack).unwrap_or(0.01);
    let max_dim = spec.image_width.max(spec.image_height);
    let cfg = effective_config(file.calibration.as_ref(), &flags, |kind| match kind {
        LocalizationSet::Additive => max_dim,
        LocalizationSet::Multiplicative => {
            LocalizationSet::Multiplicative.default_upper_bound::<f64>(&[])
        }
    })?;
    log::info!(
        "validating: {trials} trials, n_cal = {n_cal}, n_test = {n_test}, seed = {}",
        spec.seed
    );
    let report = monte_carlo_validate(&spec, &cfg, trials, n_cal, n_test)?;

    let mut t = Table::new([
        "risk",
        "mean",
        "std_error",
        "alpha",
        "frac_above_alpha",
        "status",
    ]);
    for (name, s) in report.rows() {
        let status = if s.within(slack) { "ok" } else { "VIOLATION" };
        t.row([
            name,
            &fmt(s.mean),
            &fmt(s.std_error),
            &fmt(s.alpha),
            &format!("{:.3}", s.fraction_above_alpha),
            status,
        ]);
    }
    print!("{t}");
    println!("trials = {trials}, n_cal = {n_cal}, n_test = {n_test}, slack = {slack}");
    if let Some(out) = out.or(file.out.clone()) {
        write_json(
            &out,
            &json!({ "slack": slack, "config_digest": config_digest(&cfg), "report": report }),
        )?;
        println!("report written to {}", out.display());
    }

    let violations = report.violations(slack);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violation(format!(
            "mean test risk exceeds alpha + {slack} for: {}",
            violations.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Calibrate {
            config,
            dataset,
            out,
            flags,
        } => cmd_calibrate(config, dataset, out, flags),
        Command::Infer {
            config,
            result,
            dataset,
            out,
            flags,
        } => cmd_infer(config, result, dataset, out, flags),
        Command::Evaluate {
            config,
            result,
            dataset,
            out,
            flags,
        } => cmd_evaluate(config, result, dataset, out, flags),
        Command::ImportCoco {
            gt,
            detections,
            out,
        } => cmd_import_coco(&gt, &detections, &out),
        Command::Validate {
            config,
            seed,
            trials,
            n_cal,
            n_test,
            slack,
            out,
            flags,
        } => cmd_validate(config, seed, trials, n_cal, n_test, slack, out, flags),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQCRC_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = e.classify();
            // one line, stable prefix, for scripts
            let message = e.message().replace('\n', " ");
            eprintln!("seqcrc: error kind={kind} exit={code}: {message}");
            ExitCode::from(code)
        }
    }
}
