//! Ground-truth → prediction matching.
//!
//! Each ground truth is paired with its nearest prediction under a chosen
//! distance. The map is not injective: several ground truths may share one
//! prediction. Ties go to the lowest prediction index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_distance, hausdorff_distance};
use crate::sample::{Detection, GroundTruth};
use crate::scalar::Scalar;

/// Distance used to pair ground truths with predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchDistance<T> {
    Hausdorff,
    Lac,
    Giou,
    /// `tau * lac + (1 - tau) * hausdorff`, with the Hausdorff term in pixels.
    Mix {
        tau: T,
    },
}

impl<T: Scalar> Default for MatchDistance<T> {
    fn default() -> Self {
        MatchDistance::Mix { tau: T::lit(0.25) }
    }
}

impl<T: Scalar> MatchDistance<T> {
    pub fn validate(&self) -> Result<()> {
        if let MatchDistance::Mix { tau } = *self {
            if !(tau >= T::zero() && tau <= T::one()) {
                return Err(Error::InvalidConfig(format!(
                    "mix matching tau must lie in [0, 1], got {tau}"
                )));
            }
        }
        Ok(())
    }

    /// Distance between one ground truth and one prediction.
    pub fn distance(&self, gt: &GroundTruth<T>, pred: &Detection<T>) -> Result<T> {
        match *self {
            MatchDistance::Hausdorff => Ok(hausdorff_distance(&gt.bbox, &pred.bbox)),
            MatchDistance::Lac => lac_distance(gt.class, &pred.probs),
            MatchDistance::Giou => giou_distance(&gt.bbox, &pred.bbox),
            MatchDistance::Mix { tau } => mix_distance(gt, pred, tau),
        }
    }
}

/// `1 - probs[true_class]`.
pub fn lac_distance<T: Scalar>(true_class: usize, probs: &[T]) -> Result<T> {
    probs
        .get(true_class)
        .map(|&p| T::one() - p)
        .ok_or(Error::ClassOutOfRange {
            class: true_class,
            num_classes: probs.len(),
        })
}

pub fn mix_distance<T: Scalar>(gt: &GroundTruth<T>, pred: &Detection<T>, tau: T) -> Result<T> {
    let lac = lac_distance(gt.class, &pred.probs)?;
    let haus = hausdorff_distance(&gt.bbox, &pred.bbox);
    Ok(tau * lac + (T::one() - tau) * haus)
}

/// For every ground truth, the index of its matched prediction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchingAssignment {
    pub assigned: Vec<Option<usize>>,
}

impl MatchingAssignment {
    /// All-absent assignment for `num_gts` ground truths.
    pub fn unmatched(num_gts: usize) -> Self {
        Self {
            assigned: vec![None; num_gts],
        }
    }

    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }

    pub fn get(&self, gt: usize) -> Option<usize> {
        self.assigned.get(gt).copied().flatten()
    }
}

/// Pair-distance with errors (degenerate GIoU operands, bad class labels)
/// mapped to `+inf` so such pairs lose every comparison.
fn pair_distance<T: Scalar>(
    spec: &MatchDistance<T>,
    gt: &GroundTruth<T>,
    pred: &Detection<T>,
) -> T {
    match spec.distance(gt, pred) {
        Ok(d) if !d.is_nan() => d,
        _ => T::infinity(),
    }
}

/// Matches each ground truth to its nearest prediction under `spec`.
pub fn match_objects<T: Scalar>(
    gts: &[GroundTruth<T>],
    preds: &[Detection<T>],
    spec: &MatchDistance<T>,
) -> MatchingAssignment {
    let mut matcher = IncrementalMatcher::new(gts.len());
    for pred in preds {
        matcher.push(gts, pred, spec);
    }
    matcher.assignment
}

/// Matching over a growing prefix of the prediction list.
///
/// Pushing predictions one by one yields, after each push, exactly the
/// assignment [`match_objects`] computes on the current prefix: a new
/// prediction only wins a ground truth when strictly closer, which preserves
/// the lowest-index tie rule.
#[derive(Debug, Clone)]
pub(crate) struct IncrementalMatcher<T> {
    pub(crate) assignment: MatchingAssignment,
    best: Vec<T>,
    next_index: usize,
}

impl<T: Scalar> IncrementalMatcher<T> {
    pub(crate) fn new(num_gts: usize) -> Self {
        Self {
            assignment: MatchingAssignment::unmatched(num_gts),
            best: vec![T::infinity(); num_gts],
            next_index: 0,
        }
    }

    pub(crate) fn push(
        &mut self,
        gts: &[GroundTruth<T>],
        pred: &Detection<T>,
        spec: &MatchDistance<T>,
    ) {
        let k = self.next_index;
        self.next_index += 1;
        for (j, gt) in gts.iter().enumerate() {
            let d = pair_distance(spec, gt, pred);
            if self.assignment.assigned[j].is_none() || d < self.best[j] {
                self.assignment.assigned[j] = Some(k);
                self.best[j] = d;
            }
        }
    }
}
