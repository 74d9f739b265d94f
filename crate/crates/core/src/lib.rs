//! Sequential conformal risk control for object detection.
//!
//! Given post-NMS detections on a calibration set, [`calibrate`] picks a
//! confidence threshold, a box margin and a label-set level so that the
//! expected confidence, localization and classification losses on new
//! images stay below user-chosen levels. [`infer`] applies the calibrated
//! parameters and [`evaluate`] measures risks and set sizes on a test set.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*F64` and
//! `*F32` aliases name the concrete instantiations.

pub mod calibration;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod predsets;
pub mod sample;
pub mod scalar;
pub mod synth;

pub use calibration::{
    calibrate, confidence_sweep, crc_calibrate, monotonized_losses, monotonized_risk, seqcrc_step1,
    seqcrc_step2, Bounds, CalibrationConfig, CalibrationDiagnostics, CalibrationResult,
    ConfidenceSweep, Step, StepLoss, SweepPoint, Task,
};
pub use dataio::{
    config_digest, ensure_config_matches, import_coco, load_dataset, load_result, save_result,
    CalibrationResultFile, DatasetFile,
};
pub use error::{Error, Result};
pub use geometry::{area, contains, giou_distance, hausdorff_distance, intersect, BoundingBox};
pub use inference::{
    evaluate, evaluate_image, infer, infer_detections, AppliedParameters, ConformalPrediction,
    EvaluationReport, ImageEvaluation, SelectedPrediction,
};
pub use losses::{
    cls_loss, conf_loss, loc_loss, Aggregation, ConfidenceLoss, LocalizationLoss, LossSpec,
};
pub use matching::{lac_distance, match_objects, mix_distance, MatchDistance, MatchingAssignment};
pub use predsets::{
    cls_set_aps, cls_set_lac, loc_set_additive, loc_set_multiplicative, select_confident,
    ClassificationSet, LabelSet, LocalizationSet, PredSetSpec,
};
pub use sample::{Detection, GroundTruth, ImageSample};
pub use scalar::{order_invariant_mean, Scalar};
pub use synth::{generate, monte_carlo_validate, SynthSpec, ValidationReport};

pub type BoundingBoxF64 = BoundingBox<f64>;
pub type BoundingBoxF32 = BoundingBox<f32>;
pub type DetectionF64 = Detection<f64>;
pub type DetectionF32 = Detection<f32>;
pub type ImageSampleF64 = ImageSample<f64>;
pub type ImageSampleF32 = ImageSample<f32>;
pub type CalibrationConfigF64 = CalibrationConfig<f64>;
pub type CalibrationConfigF32 = CalibrationConfig<f32>;
pub type CalibrationResultF64 = CalibrationResult<f64>;
pub type CalibrationResultF32 = CalibrationResult<f32>;
pub type EvaluationReportF64 = EvaluationReport<f64>;
pub type EvaluationReportF32 = EvaluationReport<f32>;
