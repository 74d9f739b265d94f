//! Config file loading and command-line overrides.
//!
//! The `[calibration]` table is kept as loose JSON until every override has
//! been applied, so a flag can fill a field the file leaves out.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use seqcrc::{Bounds, CalibrationConfig, LocalizationSet, SynthSpec};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    pub dataset: Option<PathBuf>,
    pub result: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub calibration: Option<Value>,
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub validate: ValidateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    pub trials: Option<usize>,
    pub n_cal: Option<usize>,
    pub n_test: Option<usize>,
    pub slack: Option<f64>,
}

impl CliConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConfidenceLossArg {
    BoxCountThreshold,
    BoxCountRecall,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LocalizationLossArg {
    Thresholded,
    Boxwise,
    Pixelwise,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Average,
    Max,
    Thresholded,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LocalizationSetArg {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassificationSetArg {
    Lac,
    Aps,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatchArg {
    Hausdorff,
    Lac,
    Giou,
    Mix,
}

/// snake_case serde name of a clap value.
fn name<E: ValueEnum>(v: E) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .replace('-', "_")
}

/// Calibration settings that override the `[calibration]` table.
#[derive(Debug, Clone, Default, Args)]
pub struct CalibrationFlags {
    #[arg(long)]
    pub alpha_cnf: Option<f64>,
    #[arg(long)]
    pub alpha_loc: Option<f64>,
    #[arg(long)]
    pub alpha_cls: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_cnf: Option<ConfidenceLossArg>,
    #[arg(long, value_enum)]
    pub loss_loc: Option<LocalizationLossArg>,
    /// Coverage fraction for the thresholded localization loss.
    #[arg(long)]
    pub loss_loc_tau: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_cls: Option<AggregationArg>,
    /// Threshold for the thresholded classification aggregation.
    #[arg(long)]
    pub loss_cls_tau: Option<f64>,
    #[arg(long, value_enum)]
    pub predset_loc: Option<LocalizationSetArg>,
    #[arg(long, value_enum)]
    pub predset_cls: Option<ClassificationSetArg>,
    #[arg(long = "match", value_enum)]
    pub matching: Option<MatchArg>,
    /// Weight of the classification term in mix matching.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Detections below this confidence are dropped on load.
    #[arg(long)]
    pub prefilter: Option<f64>,
    /// Upper end of the localization margin search range.
    #[arg(long)]
    pub lambda_loc_max: Option<f64>,
    #[arg(long)]
    pub search_steps: Option<usize>,
    /// Negative control: drop the finite-sample correction.
    #[arg(long, hide = true)]
    pub no_finite_sample_correction: bool,
}

fn object(v: &mut Value) -> &mut Map<String, Value> {
    if !v.is_object() {
        *v = json!({});
    }
    v.as_object_mut().expect("just made an object")
}

/// Replaces a tagged enum value, keeping its `tau` when the kind is unchanged.
fn set_kind(slot: &mut Value, kind: String) {
    let keep = slot.get("kind").and_then(Value::as_str) == Some(kind.as_str());
    if !keep {
        *slot = json!({ "kind": kind });
    }
}

impl CalibrationFlags {
    pub fn is_empty(&self) -> bool {
        let Self {
            alpha_cnf,
            alpha_loc,
            alpha_cls,
            loss_cnf,
            loss_loc,
            loss_loc_tau,
            loss_cls,
            loss_cls_tau,
            predset_loc,
            predset_cls,
            matching,
            tau,
            prefilter,
            lambda_loc_max,
            search_steps,
            no_finite_sample_correction,
        } = self;
        alpha_cnf.is_none()
            && alpha_loc.is_none()
            && alpha_cls.is_none()
            && loss_cnf.is_none()
            && loss_loc.is_none()
            && loss_loc_tau.is_none()
            && loss_cls.is_none()
            && loss_cls_tau.is_none()
            && predset_loc.is_none()
            && predset_cls.is_none()
            && matching.is_none()
            && tau.is_none()
            && prefilter.is_none()
            && lambda_loc_max.is_none()
            && search_steps.is_none()
            && !no_finite_sample_correction
    }

    /// Writes every given flag into the loose config value.
    pub fn apply(&self, config: &mut Value) {
        let root = object(config);
        for (key, v) in [
            ("alpha_cnf", self.alpha_cnf),
            ("alpha_loc", self.alpha_loc),
            ("alpha_cls", self.alpha_cls),
        ] {
            if let Some(v) = v {
                root.insert(key.into(), json!(v));
            }
        }
        if let Some(v) = self.prefilter {
            root.insert("prefilter_threshold".into(), json!(v));
        }
        if let Some(v) = self.search_steps {
            root.insert("binary_search_steps".into(), json!(v));
        }
        if self.no_finite_sample_correction {
            root.insert("disable_finite_sample_correction".into(), json!(true));
        }
        if let Some(upper) = self.lambda_loc_max {
            let bounds = object(
                root.entry("lambda_loc_bounds")
                    .or_insert(json!({ "lower": 0.0 })),
            );
            bounds.entry("lower").or_insert(json!(0.0));
            bounds.insert("upper".into(), json!(upper));
        }

        let loss = object(root.entry("loss").or_insert(json!({})));
        if let Some(v) = self.loss_cnf {
            loss.insert("confidence".into(), json!(name(v)));
        }
        let loc = loss
            .entry("localization")
            .or_insert(json!({ "kind": "pixelwise" }));
        if let Some(v) = self.loss_loc {
            set_kind(loc, name(v));
        }
        if let Some(t) = self.loss_loc_tau {
            object(loc).insert("tau".into(), json!(t));
        }
        let cls = loss
            .entry("classification")
            .or_insert(json!({ "kind": "average" }));
        if let Some(v) = self.loss_cls {
            set_kind(cls, name(v));
        }
        if let Some(t) = self.loss_cls_tau {
            object(cls).insert("tau".into(), json!(t));
        }

        let predset = object(root.entry("predset").or_insert(json!({})));
        if let Some(v) = self.predset_loc {
            predset.insert("localization".into(), json!(name(v)));
        }
        if let Some(v) = self.predset_cls {
            predset.insert("classification".into(), json!(name(v)));
        }

        let matching = root
            .entry("matching")
            .or_insert(json!({ "kind": "mix", "tau": 0.25 }));
        if let Some(v) = self.matching {
            set_kind(matching, name(v));
            if name(v) == "mix" {
                object(matching).entry("tau").or_insert(json!(0.25));
            }
        }
        if let Some(t) = self.tau {
            object(matching).insert("tau".into(), json!(t));
        }
    }
}

/// Localization set kind named in a loose config, additive by default.
fn localization_set(config: &Value) -> Result<LocalizationSet, CliError> {
    match config.pointer("/predset/localization") {
        None => Ok(LocalizationSet::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("predset.localization: {e}"))),
    }
}

/// Builds the effective configuration. `default_loc_upper` supplies the
/// margin search ceiling when neither the file nor the flags set one.
pub fn effective_config(
    file: Option<&Value>,
    flags: &CalibrationFlags,
    default_loc_upper: impl FnOnce(LocalizationSet) -> f64,
) -> Result<CalibrationConfig<f64>, CliError> {
    let mut value = file.cloned().unwrap_or_else(|| json!({}));
    flags.apply(&mut value);
    if value.get("lambda_loc_bounds").is_none() {
        let upper = default_loc_upper(localization_set(&value)?);
        object(&mut value).insert(
            "lambda_loc_bounds".into(),
            serde_json::to_value(Bounds::new(0.0, upper)).unwrap(),
        );
    }
    let config: CalibrationConfig<f64> = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("calibration settings: {e}")))?;
    config.validate()?;
    Ok(config)
}
