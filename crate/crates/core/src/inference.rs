//! Conformal inference on new images and test-set evaluation.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationResult;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::losses::{classification_loss_with, confidence_loss_for, localization_loss_with};
use crate::matching::match_objects;
use crate::predsets::{selected_count, LabelSet};
use crate::sample::{sort_by_confidence, Detection, ImageSample};
use crate::scalar::{order_invariant_mean, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AppliedParameters<T> {
    pub lambda_cnf: T,
    pub lambda_loc: T,
    pub lambda_cls: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SelectedPrediction<T> {
    /// Index into the image's detections sorted by descending confidence.
    pub detection_index: usize,
    pub confidence: T,
    pub original: BoundingBox<T>,
    pub margined: BoundingBox<T>,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConformalPrediction<T> {
    pub image_id: String,
    pub selected: Vec<SelectedPrediction<T>>,
    pub lambda_used: AppliedParameters<T>,
}

impl<T: Scalar> CalibrationResult<T> {
    pub fn applied_parameters(&self) -> AppliedParameters<T> {
        AppliedParameters {
            lambda_cnf: self.lambda_cnf_plus,
            lambda_loc: self.lambda_loc_plus,
            lambda_cls: self.lambda_cls_plus,
        }
    }
}

/// Prediction sets for one image. Detections must already be prefiltered
/// and sorted by descending confidence, as produced by the loaders.
pub fn infer<T: Scalar>(
    sample: &ImageSample<T>,
    result: &CalibrationResult<T>,
) -> ConformalPrediction<T> {
    build_prediction(&sample.image_id, &sample.detections, result)
}

/// Like [`infer`] for raw detections: applies the configured prefilter and
/// sorts by descending confidence first.
pub fn infer_detections<T: Scalar>(
    image_id: &str,
    detections: &[Detection<T>],
    result: &CalibrationResult<T>,
) -> ConformalPrediction<T> {
    let threshold = result.config.prefilter_threshold;
    let mut dets: Vec<Detection<T>> = detections
        .iter()
        .filter(|d| d.confidence >= threshold)
        .cloned()
        .collect();
    sort_by_confidence(&mut dets);
    build_prediction(image_id, &dets, result)
}

fn build_prediction<T: Scalar>(
    image_id: &str,
    detections: &[Detection<T>],
    result: &CalibrationResult<T>,
) -> ConformalPrediction<T> {
    let params = result.applied_parameters();
    let predset = result.config.predset;
    let count = selected_count(detections, params.lambda_cnf);
    let selected = detections[..count]
        .iter()
        .enumerate()
        .map(|(k, d)| SelectedPrediction {
            detection_index: k,
            confidence: d.confidence,
            original: d.bbox,
            margined: predset.localization.apply(&d.bbox, params.lambda_loc),
            labels: predset.classification.build(&d.probs, params.lambda_cls),
        })
        .collect();
    ConformalPrediction {
        image_id: image_id.to_string(),
        selected,
        lambda_used: params,
    }
}

/// Test losses and set sizes of one image at the calibrated parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImageEvaluation<T> {
    pub cnf_loss: T,
    pub loc_loss: T,
    pub cls_loss: T,
    pub selected: usize,
    /// Mean `sqrt(area(margined) / area(original))` over non-degenerate
    /// selected boxes.
    pub stretch: Option<T>,
    pub mean_label_set_size: Option<T>,
    pub zero_area_boxes: usize,
}

impl<T: Scalar> ImageEvaluation<T> {
    pub fn global_loss(&self) -> T {
        self.loc_loss.max(self.cls_loss)
    }
}

pub fn evaluate_image<T: Scalar>(
    sample: &ImageSample<T>,
    result: &CalibrationResult<T>,
) -> ImageEvaluation<T> {
    let cfg = &result.config;
    let pred = infer(sample, result);
    let count = pred.selected.len();
    let gts = &sample.ground_truths;
    let matching = match_objects(gts, &sample.detections[..count], &cfg.matching);

    let cnf_loss = confidence_loss_for(gts.len(), count, cfg.loss.confidence);
    let loc_loss = localization_loss_with(
        gts,
        &matching,
        count == 0,
        |k| pred.selected.get(k).map(|s| s.margined),
        cfg.loss.localization,
    );
    let cls_loss = classification_loss_with(
        gts,
        &matching,
        count == 0,
        |k, class| {
            pred.selected
                .get(k)
                .is_some_and(|s| s.labels.contains(&class))
        },
        cfg.loss.classification,
    );

    let mut zero_area_boxes = 0;
    let ratios: Vec<T> = pred
        .selected
        .iter()
        .filter_map(|s| {
            let a = s.original.area();
            if a > T::zero() {
                Some((s.margined.area() / a).sqrt())
            } else {
                zero_area_boxes += 1;
                None
            }
        })
        .collect();
    let sizes: Vec<T> = pred
        .selected
        .iter()
        .map(|s| T::from_count(s.labels.len()))
        .collect();

    ImageEvaluation {
        cnf_loss,
        loc_loss,
        cls_loss,
        selected: count,
        stretch: order_invariant_mean(&ratios),
        mean_label_set_size: order_invariant_mean(&sizes),
        zero_area_boxes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvaluationReport<T> {
    pub cnf_risk: T,
    pub loc_risk: T,
    pub cls_risk: T,
    /// Mean of the per-image maximum of the localization and classification losses.
    pub global_risk: T,
    /// Mean number of selected boxes per image.
    pub cnf_set_size: T,
    /// Mean stretch over images with at least one selected box.
    pub loc_set_size: Option<T>,
    /// Mean label-set cardinality over images with at least one selected box.
    pub cls_set_size: Option<T>,
    pub n_test: usize,
    pub images_without_selection: usize,
    pub skipped_zero_area_boxes: usize,
}

/// Risks and set sizes over a test set. Every per-image quantity is
/// averaged in an order-independent way, so the report does not depend on
/// the order of `test_samples`.
pub fn evaluate<T: Scalar>(
    test_samples: &[ImageSample<T>],
    result: &CalibrationResult<T>,
) -> Result<EvaluationReport<T>> {
    if test_samples.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let evals: Vec<ImageEvaluation<T>> = test_samples
        .iter()
        .map(|s| evaluate_image(s, result))
        .collect();
    Ok(summarize(&evals))
}

pub(crate) fn summarize<T: Scalar>(evals: &[ImageEvaluation<T>]) -> EvaluationReport<T> {
    let column = |f: &dyn Fn(&ImageEvaluation<T>) -> T| {
        order_invariant_mean(&evals.iter().map(f).collect::<Vec<_>>()).unwrap_or(T::zero())
    };
    let present = |f: &dyn Fn(&ImageEvaluation<T>) -> Option<T>| {
        order_invariant_mean(&evals.iter().filter_map(f).collect::<Vec<_>>())
    };
    EvaluationReport {
        cnf_risk: column(&|e| e.cnf_loss),
        loc_risk: column(&|e| e.loc_loss),
        cls_risk: column(&|e| e.cls_loss),
        global_risk: column(&|e| e.global_loss()),
        cnf_set_size: column(&|e| T::from_count(e.selected)),
        loc_set_size: present(&|e| e.stretch),
        cls_set_size: present(&|e| e.mean_label_set_size),
        n_test: evals.len(),
        images_without_selection: evals.iter().filter(|e| e.selected == 0).count(),
        skipped_zero_area_boxes: evals.iter().map(|e| e.zero_area_boxes).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{Bounds, CalibrationConfig, CalibrationDiagnostics};
    use crate::losses::LocalizationLoss;
    use crate::matching::MatchDistance;
    use crate::predsets::ClassificationSet;
    use crate::sample::GroundTruth;

    fn result(cnf: f64, loc: f64, cls: f64) -> CalibrationResult<f64> {
        let mut config = CalibrationConfig::new(0.02, 0.1, 0.1, Bounds::new(0.0, 100.0));
        config.matching = MatchDistance::Hausdorff;
        config.loss.localization = LocalizationLoss::Boxwise;
        config.predset.classification = ClassificationSet::Aps;
        CalibrationResult {
            lambda_cnf_plus: cnf,
            lambda_cnf_minus: cnf,
            lambda_loc_plus: loc,
            lambda_cls_plus: cls,
            config,
            n_calibration: 10,
            diagnostics: CalibrationDiagnostics {
                cnf_risk: 0.0,
                loc_risk: 0.0,
                cls_risk: 0.0,
                sweep_points: 0,
            },
        }
    }

    fn det(b: [f64; 4], probs: Vec<f64>, conf: f64) -> Detection<f64> {
        Detection::new(b.into(), probs, conf)
    }

    #[test]
    fn empty_detections_give_empty_prediction() {
        let s = ImageSample::new("e", vec![], vec![]);
        let p = infer(&s, &result(1.0, 5.0, 0.5));
        assert!(p.selected.is_empty());
        assert_eq!(p.image_id, "e");
    }

    #[test]
    fn identity_parameters() {
        let s = ImageSample::new(
            "i",
            vec![],
            vec![
                det([0., 0., 4., 4.], vec![0.2, 0.7, 0.1], 0.9),
                det([1., 1., 2., 2.], vec![0.6, 0.3, 0.1], 0.8),
            ],
        );
        let p = infer(&s, &result(1.0, 0.0, 0.0));
        assert_eq!(p.selected.len(), 2);
        for (sel, d) in p.selected.iter().zip(&s.detections) {
            assert_eq!(sel.margined, sel.original);
            assert_eq!(sel.labels, vec![d.argmax_class()]);
        }
    }

    #[test]
    fn hand_trace() {
        let dets = vec![
            det([0., 0., 10., 10.], vec![0.5, 0.3, 0.2], 0.5),
            det([20., 20., 30., 30.], vec![0.1, 0.8, 0.1], 0.9),
            det([5., 5., 6., 6.], vec![0.3, 0.3, 0.4], 0.2),
        ];
        let p = infer_detections("t", &dets, &result(0.6, 2.0, 0.6));
        assert_eq!(p.selected.len(), 2);
        assert_eq!(p.selected[0].confidence, 0.9);
        assert_eq!(p.selected[0].margined, BoundingBox::new(18., 18., 32., 32.));
        assert_eq!(p.selected[0].labels, vec![1]);
        assert_eq!(p.selected[1].margined, BoundingBox::new(-2., -2., 12., 12.));
        assert_eq!(p.selected[1].labels, vec![0, 1]);
        assert_eq!(p.lambda_used.lambda_cnf, 0.6);
    }

    #[test]
    fn infer_detections_applies_prefilter() {
        let dets = vec![det([0., 0., 1., 1.], vec![1.0], 1e-5)];
        assert!(infer_detections("p", &dets, &result(1.0, 0.0, 1.0))
            .selected
            .is_empty());
    }

    fn covered_sample(id: &str) -> ImageSample<f64> {
        ImageSample::new(
            id,
            vec![GroundTruth::new(BoundingBox::new(1., 1., 9., 9.), 0)],
            vec![
                det([0., 0., 10., 10.], vec![0.9, 0.1], 0.9),
                det([0., 0., 20., 20.], vec![0.9, 0.1], 0.8),
            ],
        )
    }

    #[test]
    fn zero_margin_has_unit_stretch_and_zero_risk() {
        let test = vec![covered_sample("a"), covered_sample("b")];
        let rep = evaluate(&test, &result(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(rep.loc_set_size, Some(1.0));
        assert_eq!(rep.global_risk, 0.0);
        assert_eq!(rep.cnf_set_size, 2.0);
        assert_eq!(rep.cls_set_size, Some(1.0));
    }

    #[test]
    fn quadrupled_area_gives_stretch_two() {
        let mut config = result(1.0, 0.5, 0.0);
        config.config.predset.localization = crate::predsets::LocalizationSet::Multiplicative;
        let rep = evaluate(&[covered_sample("a")], &config).unwrap();
        assert_eq!(rep.loc_set_size, Some(2.0));
    }

    #[test]
    fn empty_selection_counts_in_risk_but_not_in_sizes() {
        let miss = ImageSample::new(
            "m",
            vec![GroundTruth::new(BoundingBox::new(1., 1., 9., 9.), 0)],
            vec![det([0., 0., 10., 10.], vec![0.9, 0.1], 0.1)],
        );
        let rep = evaluate(&[covered_sample("a"), miss], &result(0.5, 0.0, 0.0)).unwrap();
        assert_eq!(rep.loc_risk, 0.5);
        assert_eq!(rep.cls_risk, 0.5);
        assert_eq!(rep.cnf_risk, 0.5);
        assert_eq!(rep.images_without_selection, 1);
        assert_eq!(rep.loc_set_size, Some(1.0));
    }

    #[test]
    fn zero_area_boxes_are_skipped() {
        let s = ImageSample::new("z", vec![], vec![det([3., 3., 3., 5.], vec![1.0], 0.9)]);
        let rep = evaluate(&[s], &result(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(rep.skipped_zero_area_boxes, 1);
        assert_eq!(rep.loc_set_size, None);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(
            evaluate::<f64>(&[], &result(1.0, 0.0, 0.0)),
            Err(Error::EmptyTestSet)
        ));
    }
}
