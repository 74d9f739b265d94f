//! Parameterized prediction sets: confidence filtering, localization
//! margins and classification label sets. Every constructor is nested in
//! its parameter.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::sample::{Detection, ImageSample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationSet {
    /// Same pixel margin on every side.
    #[default]
    Additive,
    /// Margin proportional to the box width (horizontal) and height (vertical).
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationSet {
    #[default]
    Lac,
    Aps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredSetSpec {
    pub localization: LocalizationSet,
    pub classification: ClassificationSet,
}

/// Sorted class labels.
pub type LabelSet = Vec<usize>;

/// Number of leading detections kept at confidence parameter `lambda_cnf`.
/// Detections must be sorted by descending confidence.
pub fn selected_count<T: Scalar>(detections: &[Detection<T>], lambda_cnf: T) -> usize {
    detections.partition_point(|d| d.selection_key() <= lambda_cnf)
}

/// Indices of detections with `confidence >= 1 - lambda_cnf`, in
/// descending-confidence order.
pub fn select_confident<T: Scalar>(sample: &ImageSample<T>, lambda_cnf: T) -> Vec<usize> {
    (0..selected_count(&sample.detections, lambda_cnf)).collect()
}

fn check_margin<T: Scalar>(lambda_loc: T) -> Result<()> {
    if lambda_loc >= T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "localization parameter must be non-negative, got {lambda_loc}"
        )))
    }
}

pub fn loc_set_additive<T: Scalar>(bbox: &BoundingBox<T>, lambda_loc: T) -> Result<BoundingBox<T>> {
    check_margin(lambda_loc)?;
    Ok(LocalizationSet::Additive.apply(bbox, lambda_loc))
}

pub fn loc_set_multiplicative<T: Scalar>(
    bbox: &BoundingBox<T>,
    lambda_loc: T,
) -> Result<BoundingBox<T>> {
    check_margin(lambda_loc)?;
    Ok(LocalizationSet::Multiplicative.apply(bbox, lambda_loc))
}

impl LocalizationSet {
    /// Margined box; `lambda_loc` is assumed non-negative.
    pub fn apply<T: Scalar>(self, bbox: &BoundingBox<T>, lambda_loc: T) -> BoundingBox<T> {
        match self {
            LocalizationSet::Additive => bbox.expand(lambda_loc, lambda_loc),
            LocalizationSet::Multiplicative => {
                bbox.expand(lambda_loc * bbox.width(), lambda_loc * bbox.height())
            }
        }
    }

    /// Default upper end of the margin search range.
    pub fn default_upper_bound<T: Scalar>(self, samples: &[ImageSample<T>]) -> T {
        match self {
            LocalizationSet::Additive => samples
                .iter()
                .map(ImageSample::max_dimension)
                .fold(T::zero(), T::max),
            LocalizationSet::Multiplicative => T::lit(3.0),
        }
    }
}

/// LAC set: every class with probability at least `1 - lambda_cls`.
pub fn cls_set_lac<T: Scalar>(probs: &[T], lambda_cls: T) -> LabelSet {
    let threshold = T::one() - lambda_cls;
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(k, _)| k)
        .collect()
}

/// Class indices by descending probability, ascending index on ties.
fn ranked_classes<T: Scalar>(probs: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// APS set: shortest descending-probability prefix whose cumulative mass
/// strictly exceeds `lambda_cls`; all classes when `lambda_cls >= 1`.
pub fn cls_set_aps<T: Scalar>(probs: &[T], lambda_cls: T) -> LabelSet {
    if lambda_cls >= T::one() {
        return (0..probs.len()).collect();
    }
    let order = ranked_classes(probs);
    let mut cumulative = T::zero();
    let mut size = order.len();
    for (m, &k) in order.iter().enumerate() {
        cumulative = cumulative + probs[k];
        if cumulative > lambda_cls {
            size = m + 1;
            break;
        }
    }
    let mut set = order[..size].to_vec();
    set.sort_unstable();
    set
}

impl ClassificationSet {
    pub fn build<T: Scalar>(self, probs: &[T], lambda_cls: T) -> LabelSet {
        match self {
            ClassificationSet::Lac => cls_set_lac(probs, lambda_cls),
            ClassificationSet::Aps => cls_set_aps(probs, lambda_cls),
        }
    }

    /// Whether `class` belongs to the set built at `lambda_cls`.
    pub fn contains<T: Scalar>(self, probs: &[T], lambda_cls: T, class: usize) -> bool {
        match self {
            ClassificationSet::Lac => probs
                .get(class)
                .is_some_and(|&p| p >= T::one() - lambda_cls),
            ClassificationSet::Aps => cls_set_aps(probs, lambda_cls).binary_search(&class).is_ok(),
        }
    }
}
