//! File formats: the native dataset schema, COCO import, and calibration
//! result persistence.
//!
//! All files are JSON. Floats are written with shortest round-trip
//! formatting, so a write/read cycle reproduces every value exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationConfig, CalibrationDiagnostics, CalibrationResult};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::sample::{Detection, GroundTruth, ImageSample};
use crate::scalar::Scalar;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Tolerance on the sum of a stored probability vector.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-4;

/// Mass spread over the other classes when a COCO detection carries only a
/// scalar score.
pub const SYNTHETIC_PROB_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruthRecord<T> {
    pub bbox: BoundingBox<T>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DetectionRecord<T> {
    pub bbox: BoundingBox<T>,
    pub confidence: T,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImageRecord<T> {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<T>,
    #[serde(default)]
    pub ground_truths: Vec<GroundTruthRecord<T>>,
    #[serde(default)]
    pub detections: Vec<DetectionRecord<T>>,
}

/// The native dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DatasetFile<T> {
    pub schema_version: u32,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Free-form record of how the file was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
    pub images: Vec<ImageRecord<T>>,
}

fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `value` as pretty-printed JSON.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn schema_error(image_id: &str, record: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        image_id: image_id.to_string(),
        record: record.into(),
        message: message.into(),
    }
}

impl<T: Scalar> DatasetFile<T> {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Checks every structural invariant, naming the first offending record.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: self.schema_version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        let k = self.num_classes;
        if k == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != k {
            return Err(Error::InvalidConfig(format!(
                "class_names has {} entries for {k} classes",
                self.class_names.len()
            )));
        }
        let tol = T::lit(PROBABILITY_SUM_TOLERANCE);
        for img in &self.images {
            let id = img.image_id.as_str();
            for (j, g) in img.ground_truths.iter().enumerate() {
                let rec = format!("ground_truths[{j}]");
                if !g.bbox.is_valid() {
                    return Err(schema_error(
                        id,
                        rec,
                        "box corners out of order or non-finite",
                    ));
                }
                if g.class >= k {
                    return Err(schema_error(
                        id,
                        rec,
                        format!("class {} >= num_classes {k}", g.class),
                    ));
                }
            }
            for (j, d) in img.detections.iter().enumerate() {
                let rec = format!("detections[{j}]");
                if !d.bbox.is_valid() {
                    return Err(schema_error(
                        id,
                        rec,
                        "box corners out of order or non-finite",
                    ));
                }
                if !(d.confidence >= T::zero() && d.confidence <= T::one()) {
                    return Err(schema_error(
                        id,
                        rec,
                        format!("confidence {} outside [0, 1]", d.confidence),
                    ));
                }
                if d.probs.len() != k {
                    return Err(schema_error(
                        id,
                        rec,
                        format!(
                            "probability vector has length {}, expected {k}",
                            d.probs.len()
                        ),
                    ));
                }
                if d.probs.iter().any(|p| !(*p >= T::zero())) {
                    return Err(schema_error(id, rec, "negative or non-finite probability"));
                }
                let sum = d.probs.iter().fold(T::zero(), |a, &p| a + p);
                if (sum - T::one()).abs() > tol {
                    return Err(schema_error(
                        id,
                        rec,
                        format!("probabilities sum to {sum}, not 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Validated samples with detections below `prefilter_threshold` dropped
    /// and the rest sorted by descending confidence.
    pub fn to_samples(&self, prefilter_threshold: T) -> Result<Vec<ImageSample<T>>> {
        self.validate()?;
        Ok(self
            .images
            .iter()
            .map(|img| {
                let gts = img
                    .ground_truths
                    .iter()
                    .map(|g| GroundTruth::new(g.bbox, g.class))
                    .collect();
                let dets = img
                    .detections
                    .iter()
                    .filter(|d| d.confidence >= prefilter_threshold)
                    .map(|d| Detection::new(d.bbox, d.probs.clone(), d.confidence))
                    .collect();
                let mut s = ImageSample::new(img.image_id.clone(), gts, dets);
                if let (Some(w), Some(h)) = (img.width, img.height) {
                    s = s.with_image_size(w, h);
                }
                s
            })
            .collect())
    }

    /// Dataset file holding `samples`.
    pub fn from_samples(
        samples: &[ImageSample<T>],
        num_classes: usize,
        class_names: Vec<String>,
    ) -> Self {
        let images = samples
            .iter()
            .map(|s| ImageRecord {
                image_id: s.image_id.clone(),
                width: s.image_size.map(|(w, _)| w),
                height: s.image_size.map(|(_, h)| h),
                ground_truths: s
                    .ground_truths
                    .iter()
                    .map(|g| GroundTruthRecord {
                        bbox: g.bbox,
                        class: g.class,
                    })
                    .collect(),
                detections: s
                    .detections
                    .iter()
                    .map(|d| DetectionRecord {
                        bbox: d.bbox,
                        confidence: d.confidence,
                        probs: d.probs.clone(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            num_classes,
            class_names,
            source: None,
            images,
        }
    }
}

/// Reads, validates, prefilters and sorts a native dataset file.
pub fn load_dataset<T: Scalar>(path: &Path, prefilter_threshold: T) -> Result<Vec<ImageSample<T>>> {
    DatasetFile::<T>::read(path)?.to_samples(prefilter_threshold)
}

// ---------------------------------------------------------------------------
// COCO import
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: i64,
    #[serde(default)]
    width: Option<f64>,
    #[serde(default)]
    height: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: i64,
    #[serde(default)]
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoGroundTruth {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoDetection {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    score: f64,
    /// Optional full class-score vector, in dense category order.
    #[serde(default)]
    scores: Option<Vec<f64>>,
}

/// Outcome of a COCO import.
#[derive(Debug, Clone)]
pub struct CocoImport<T> {
    pub dataset: DatasetFile<T>,
    /// Number of detections whose probability vector was synthesized from
    /// the scalar score.
    pub synthesized_probability_vectors: usize,
}

/// Probability vector with `1 - eps` on `class` and the rest spread evenly.
pub fn synthesize_probs<T: Scalar>(class: usize, num_classes: usize) -> Vec<T> {
    if num_classes == 1 {
        return vec![T::one()];
    }
    let eps = SYNTHETIC_PROB_EPSILON;
    let rest = T::lit(eps / (num_classes - 1) as f64);
    (0..num_classes)
        .map(|k| if k == class { T::lit(1.0 - eps) } else { rest })
        .collect()
}

/// Converts a COCO annotation file and a COCO detection-results file into
/// the native schema. Category ids are mapped to dense indices in ascending
/// id order.
pub fn import_coco<T: Scalar>(gt_path: &Path, det_path: &Path) -> Result<CocoImport<T>> {
    let gt: CocoGroundTruth = read_json(gt_path)?;
    let dets: Vec<CocoDetection> = read_json(det_path)?;

    let mut categories: Vec<&CocoCategory> = gt.categories.iter().collect();
    categories.sort_by_key(|c| c.id);
    let dense: HashMap<i64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    let k = categories.len();
    if k == 0 {
        return Err(Error::InvalidConfig(format!(
            "{} declares no categories",
            gt_path.display()
        )));
    }

    let mut order: Vec<i64> = Vec::new();
    let mut images: BTreeMap<i64, ImageRecord<T>> = BTreeMap::new();
    let mut ensure = |id: i64, w: Option<f64>, h: Option<f64>, order: &mut Vec<i64>| {
        images.entry(id).or_insert_with(|| {
            order.push(id);
            ImageRecord {
                image_id: id.to_string(),
                width: w.map(T::lit),
                height: h.map(T::lit),
                ground_truths: Vec::new(),
                detections: Vec::new(),
            }
        });
    };
    for img in &gt.images {
        ensure(img.id, img.width, img.height, &mut order);
    }
    for ann in &gt.annotations {
        ensure(ann.image_id, None, None, &mut order);
    }
    for det in &dets {
        ensure(det.image_id, None, None, &mut order);
    }

    for (idx, ann) in gt.annotations.iter().enumerate() {
        let class = *dense.get(&ann.category_id).ok_or(Error::Schema {
            image_id: ann.image_id.to_string(),
            record: format!("annotations[{idx}]"),
            message: format!("unknown category id {}", ann.category_id),
        })?;
        let [x, y, w, h] = ann.bbox.map(T::lit);
        if let Some(img) = images.get_mut(&ann.image_id) {
            img.ground_truths.push(GroundTruthRecord {
                bbox: BoundingBox::from_xywh(x, y, w, h),
                class,
            });
        }
    }

    let mut synthesized = 0;
    for (idx, det) in dets.iter().enumerate() {
        let class = *dense.get(&det.category_id).ok_or(Error::UnknownCategory {
            category_id: det.category_id,
            index: idx,
        })?;
        let probs = match &det.scores {
            Some(v) if v.len() == k => v.iter().map(|&p| T::lit(p)).collect(),
            Some(v) => {
                return Err(Error::Schema {
                    image_id: det.image_id.to_string(),
                    record: format!("detections[{idx}]"),
                    message: format!("scores has length {}, expected {k}", v.len()),
                })
            }
            None => {
                synthesized += 1;
                synthesize_probs(class, k)
            }
        };
        let [x, y, w, h] = det.bbox.map(T::lit);
        if let Some(img) = images.get_mut(&det.image_id) {
            img.detections.push(DetectionRecord {
                bbox: BoundingBox::from_xywh(x, y, w, h),
                confidence: T::lit(det.score),
                probs,
            });
        }
    }
    if synthesized > 0 {
        log::warn!(
            "{synthesized} detection(s) carry only a scalar score: synthesized near one-hot probability vectors; \
             LAC/APS label sets are degenerate for them"
        );
    }

    let dataset = DatasetFile {
        schema_version: DATASET_SCHEMA_VERSION,
        num_classes: k,
        class_names: categories.iter().map(|c| c.name.clone()).collect(),
        source: Some(serde_json::json!({
            "importer": "coco",
            "ground_truths": gt_path.display().to_string(),
            "detections": det_path.display().to_string(),
            "synthesized_probability_vectors": synthesized,
        })),
        images: order.iter().filter_map(|id| images.remove(id)).collect(),
    };
    Ok(CocoImport {
        dataset,
        synthesized_probability_vectors: synthesized,
    })
}

// ---------------------------------------------------------------------------
// Calibration results
// ---------------------------------------------------------------------------

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn config_digest<T: Scalar>(config: &CalibrationConfig<T>) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibrationResultFile<T> {
    pub schema_version: u32,
    pub lambda_cnf_plus: T,
    pub lambda_cnf_minus: T,
    pub lambda_loc_plus: T,
    pub lambda_cls_plus: T,
    pub alpha_cnf: T,
    pub alpha_loc: T,
    pub alpha_cls: T,
    pub n_calibration: usize,
    pub diagnostics: CalibrationDiagnostics<T>,
    pub config: CalibrationConfig<T>,
    pub config_digest: String,
}

impl<T: Scalar> From<&CalibrationResult<T>> for CalibrationResultFile<T> {
    fn from(r: &CalibrationResult<T>) -> Self {
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            lambda_cnf_plus: r.lambda_cnf_plus,
            lambda_cnf_minus: r.lambda_cnf_minus,
            lambda_loc_plus: r.lambda_loc_plus,
            lambda_cls_plus: r.lambda_cls_plus,
            alpha_cnf: r.config.alpha_cnf,
            alpha_loc: r.config.alpha_loc,
            alpha_cls: r.config.alpha_cls,
            n_calibration: r.n_calibration,
            diagnostics: r.diagnostics,
            config: r.config.clone(),
            config_digest: config_digest(&r.config),
        }
    }
}

impl<T: Scalar> CalibrationResultFile<T> {
    /// Checks version and digest, then rebuilds the result.
    pub fn into_result(self) -> Result<CalibrationResult<T>> {
        if self.schema_version != RESULT_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: self.schema_version,
                expected: RESULT_SCHEMA_VERSION,
            });
        }
        let found = config_digest(&self.config);
        if found != self.config_digest {
            return Err(Error::DigestMismatch {
                expected: self.config_digest,
                found,
            });
        }
        let alphas = (
            self.config.alpha_cnf,
            self.config.alpha_loc,
            self.config.alpha_cls,
        );
        if alphas != (self.alpha_cnf, self.alpha_loc, self.alpha_cls) {
            return Err(Error::InvalidConfig(
                "alpha echo disagrees with the embedded config".into(),
            ));
        }
        Ok(CalibrationResult {
            lambda_cnf_plus: self.lambda_cnf_plus,
            lambda_cnf_minus: self.lambda_cnf_minus,
            lambda_loc_plus: self.lambda_loc_plus,
            lambda_cls_plus: self.lambda_cls_plus,
            config: self.config,
            n_calibration: self.n_calibration,
            diagnostics: self.diagnostics,
        })
    }
}

pub fn save_result<T: Scalar>(result: &CalibrationResult<T>, path: &Path) -> Result<()> {
    write_json(path, &CalibrationResultFile::from(result))
}

pub fn load_result<T: Scalar>(path: &Path) -> Result<CalibrationResult<T>> {
    // Peek at the version first so an old file fails with a version error
    // rather than a field-level parse error.
    let raw: serde_json::Value = read_json(path)?;
    let version = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64);
    if version != Some(RESULT_SCHEMA_VERSION as u64) {
        return Err(Error::VersionMismatch {
            found: version.unwrap_or(0) as u32,
            expected: RESULT_SCHEMA_VERSION,
        });
    }
    let file: CalibrationResultFile<T> =
        serde_json::from_value(raw).map_err(|source| Error::Parse {
            path: path.display().to_string(),
            source,
        })?;
    file.into_result()
}

/// Refuses `result` unless it was produced with `config`.
pub fn ensure_config_matches<T: Scalar>(
    result: &CalibrationResult<T>,
    config: &CalibrationConfig<T>,
) -> Result<()> {
    let expected = config_digest(&result.config);
    let found = config_digest(config);
    if expected == found {
        Ok(())
    } else {
        Err(Error::DigestMismatch { expected, found })
    }
}
