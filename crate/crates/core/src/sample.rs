//! Per-image data: ground-truth objects and post-NMS detections.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruth<T> {
    pub bbox: BoundingBox<T>,
    pub class: usize,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new(bbox: BoundingBox<T>, class: usize) -> Self {
        Self { bbox, class }
    }
}

/// One predicted object: box, class probability vector and confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Detection<T> {
    pub bbox: BoundingBox<T>,
    pub probs: Vec<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BoundingBox<T>, probs: Vec<T>, confidence: T) -> Self {
        Self {
            bbox,
            probs,
            confidence,
        }
    }

    /// `1 - confidence`: the smallest confidence parameter that keeps this
    /// detection. Selection everywhere compares this key against the
    /// parameter, so a parameter computed as `1 - c` always keeps `c`.
    pub fn selection_key(&self) -> T {
        T::one() - self.confidence
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

/// One image: its ground truths and its detections, the latter sorted by
/// descending confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImageSample<T> {
    pub image_id: String,
    /// `(width, height)` in pixels when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(T, T)>,
    pub ground_truths: Vec<GroundTruth<T>>,
    pub detections: Vec<Detection<T>>,
}

impl<T: Scalar> ImageSample<T> {
    /// Builds a sample; detections are stably sorted by descending confidence.
    pub fn new(
        image_id: impl Into<String>,
        ground_truths: Vec<GroundTruth<T>>,
        mut detections: Vec<Detection<T>>,
    ) -> Self {
        sort_by_confidence(&mut detections);
        Self {
            image_id: image_id.into(),
            image_size: None,
            ground_truths,
            detections,
        }
    }

    pub fn with_image_size(mut self, width: T, height: T) -> Self {
        self.image_size = Some((width, height));
        self
    }

    pub fn num_objects(&self) -> usize {
        self.ground_truths.len()
    }

    pub fn is_sorted_by_confidence(&self) -> bool {
        self.detections
            .windows(2)
            .all(|w| w[0].confidence >= w[1].confidence)
    }

    /// Largest image dimension, falling back to the largest box coordinate
    /// when the image size is unknown.
    pub fn max_dimension(&self) -> T {
        match self.image_size {
            Some((w, h)) => w.max(h),
            None => self
                .ground_truths
                .iter()
                .map(|g| g.bbox)
                .chain(self.detections.iter().map(|d| d.bbox))
                .flat_map(|b| [b.right, b.bottom, b.left.abs(), b.top.abs()])
                .fold(T::zero(), T::max),
        }
    }
}

pub(crate) fn sort_by_confidence<T: Scalar>(detections: &mut [Detection<T>]) {
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(conf: f64) -> Detection<f64> {
        Detection::new(BoundingBox::new(0., 0., 1., 1.), vec![1.0], conf)
    }

    #[test]
    fn new_sorts_detections_stably() {
        let mut a = det(0.5);
        a.probs = vec![0.9];
        let s = ImageSample::new("x", vec![], vec![det(0.2), a.clone(), det(0.9), det(0.5)]);
        let confs: Vec<f64> = s.detections.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.5, 0.5, 0.2]);
        assert_eq!(s.detections[1], a);
        assert!(s.is_sorted_by_confidence());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = Detection::new(BoundingBox::new(0., 0., 1., 1.), vec![0.4, 0.4, 0.2], 1.0);
        assert_eq!(d.argmax_class(), 0);
    }
}
