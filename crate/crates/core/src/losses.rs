//! Per-image calibration losses for the confidence, localization and
//! classification tasks. Every loss takes values in `[0, 1]`.
//!
//! Two edge rules apply to all three tasks: an image without ground truth
//! has loss 0, and an image with ground truth but no selected prediction has
//! loss 1 (localization and classification; the confidence losses reach 1
//! on their own in that case).

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::matching::MatchingAssignment;
use crate::predsets::LabelSet;
use crate::sample::{GroundTruth, ImageSample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceLoss {
    /// 0 when at least as many boxes as objects are kept, else 1.
    BoxCountThreshold,
    /// Fraction of objects not accounted for by kept boxes.
    #[default]
    BoxCountRecall,
}

fn default_tau_one<T: Scalar>() -> T {
    T::one()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalizationLoss<T> {
    /// 0 when at least a fraction `tau` of the objects are covered, else 1.
    Thresholded {
        #[serde(default = "default_tau_one")]
        tau: T,
    },
    /// One minus the fraction of covered objects.
    Boxwise,
    /// One minus the mean covered fraction of object area.
    Pixelwise,
}

impl<T> Default for LocalizationLoss<T> {
    fn default() -> Self {
        LocalizationLoss::Pixelwise
    }
}

/// How per-object classification misses are combined into one image loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation<T> {
    Average,
    Max,
    /// 1 when the average miss rate exceeds `tau`, else 0.
    Thresholded {
        tau: T,
    },
}

impl<T> Default for Aggregation<T> {
    fn default() -> Self {
        Aggregation::Average
    }
}

impl<T: Scalar> Aggregation<T> {
    /// Aggregates values in `[0, 1]`; `values` must be non-empty.
    pub fn apply(&self, values: &[T]) -> T {
        let mean = || values.iter().fold(T::zero(), |a, &v| a + v) / T::from_count(values.len());
        match *self {
            Aggregation::Average => mean(),
            Aggregation::Max => values.iter().fold(T::zero(), |a, &v| a.max(v)),
            Aggregation::Thresholded { tau } => {
                if mean() > tau {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct LossSpec<T> {
    pub confidence: ConfidenceLoss,
    pub localization: LocalizationLoss<T>,
    pub classification: Aggregation<T>,
}

pub fn conf_loss<T: Scalar>(
    sample: &ImageSample<T>,
    selected_count: usize,
    kind: ConfidenceLoss,
) -> T {
    confidence_loss_for(sample.num_objects(), selected_count, kind)
}

pub(crate) fn confidence_loss_for<T: Scalar>(
    num_objects: usize,
    selected_count: usize,
    kind: ConfidenceLoss,
) -> T {
    if num_objects == 0 {
        return T::zero();
    }
    let missing = num_objects.saturating_sub(selected_count);
    match kind {
        ConfidenceLoss::BoxCountThreshold => {
            if missing == 0 {
                T::zero()
            } else {
                T::one()
            }
        }
        ConfidenceLoss::BoxCountRecall => T::from_count(missing) / T::from_count(num_objects),
    }
}

/// Localization loss against margined boxes aligned with the selected
/// prediction list referenced by `matching`.
pub fn loc_loss<T: Scalar>(
    sample: &ImageSample<T>,
    matching: &MatchingAssignment,
    margined_boxes: &[BoundingBox<T>],
    kind: LocalizationLoss<T>,
) -> T {
    localization_loss_with(
        &sample.ground_truths,
        matching,
        margined_boxes.is_empty(),
        |k| margined_boxes.get(k).copied(),
        kind,
    )
}

/// Covered fraction of `gt` by `cover`: its area share, or plain inclusion
/// for a zero-area ground truth.
fn covered_area_fraction<T: Scalar>(gt: &BoundingBox<T>, cover: &BoundingBox<T>) -> T {
    let a = gt.area();
    if a > T::zero() {
        (gt.intersect(cover).area() / a).min(T::one())
    } else if cover.contains(gt) {
        T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn localization_loss_with<T: Scalar>(
    gts: &[GroundTruth<T>],
    matching: &MatchingAssignment,
    no_selection: bool,
    margined: impl Fn(usize) -> Option<BoundingBox<T>>,
    kind: LocalizationLoss<T>,
) -> T {
    if gts.is_empty() {
        return T::zero();
    }
    if no_selection {
        return T::one();
    }
    let n = T::from_count(gts.len());
    let cover_of = |j: usize| matching.get(j).and_then(&margined);
    match kind {
        LocalizationLoss::Pixelwise => {
            let covered = gts.iter().enumerate().fold(T::zero(), |acc, (j, g)| {
                acc + cover_of(j).map_or(T::zero(), |c| covered_area_fraction(&g.bbox, &c))
            });
            (T::one() - covered / n).max(T::zero())
        }
        LocalizationLoss::Boxwise | LocalizationLoss::Thresholded { .. } => {
            let covered = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| cover_of(*j).is_some_and(|c| c.contains(&g.bbox)))
                .count();
            let fraction = T::from_count(covered) / n;
            match kind {
                LocalizationLoss::Thresholded { tau } => {
                    if fraction >= tau {
                        T::zero()
                    } else {
                        T::one()
                    }
                }
                _ => T::one() - fraction,
            }
        }
    }
}

/// Classification loss against label sets aligned with the selected
/// prediction list referenced by `matching`.
pub fn cls_loss<T: Scalar>(
    sample: &ImageSample<T>,
    matching: &MatchingAssignment,
    class_sets: &[LabelSet],
    aggregation: Aggregation<T>,
) -> T {
    classification_loss_with(
        &sample.ground_truths,
        matching,
        class_sets.is_empty(),
        |k, class| class_sets.get(k).is_some_and(|s| s.contains(&class)),
        aggregation,
    )
}

pub(crate) fn classification_loss_with<T: Scalar>(
    gts: &[GroundTruth<T>],
    matching: &MatchingAssignment,
    no_selection: bool,
    contains: impl Fn(usize, usize) -> bool,
    aggregation: Aggregation<T>,
) -> T {
    if gts.is_empty() {
        return T::zero();
    }
    if no_selection {
        return T::one();
    }
    let misses: Vec<T> = gts
        .iter()
        .enumerate()
        .map(|(j, g)| match matching.get(j) {
            Some(k) if contains(k, g.class) => T::zero(),
            _ => T::one(),
        })
        .collect();
    aggregation.apply(&misses)
}
