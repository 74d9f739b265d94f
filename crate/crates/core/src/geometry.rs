//! Axis-aligned bounding boxes in pixel coordinates and the geometric
//! matching distances.
//!
//! Boxes use the corner representation `(left, top, right, bottom)` with the
//! y axis pointing down. Margined boxes are never clamped to the image, so
//! coordinates may be negative or exceed the image size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]", bound = "T: Scalar")]
pub struct BoundingBox<T> {
    pub left: T,
    pub top: T,
    pub right: T,
    pub bottom: T,
}

impl<T: Copy> From<[T; 4]> for BoundingBox<T> {
    fn from([left, top, right, bottom]: [T; 4]) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }
}

impl<T: Copy> From<BoundingBox<T>> for [T; 4] {
    fn from(b: BoundingBox<T>) -> Self {
        [b.left, b.top, b.right, b.bottom]
    }
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(left: T, top: T, right: T, bottom: T) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    /// Builds a box and checks corner ordering and finiteness.
    pub fn try_new(left: T, top: T, right: T, bottom: T) -> Result<Self> {
        let b = Self::new(left, top, right, bottom);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(format!(
                "corners out of order or non-finite: ({left}, {top}, {right}, {bottom})"
            )))
        }
    }

    /// Converts a `[x, y, width, height]` box (COCO convention).
    pub fn from_xywh(x: T, y: T, width: T, height: T) -> Self {
        Self::new(x, y, x + width, y + height)
    }

    /// The canonical empty box returned for disjoint intersections.
    pub fn empty() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn is_valid(&self) -> bool {
        [self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| v.is_finite())
            && self.left <= self.right
            && self.top <= self.bottom
    }

    pub fn width(&self) -> T {
        (self.right - self.left).max(T::zero())
    }

    pub fn height(&self) -> T {
        (self.bottom - self.top).max(T::zero())
    }

    /// Area in pixels²; zero for degenerate boxes.
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn intersect(&self, other: &Self) -> Self {
        let left = self.left.max(other.left);
        let top = self.top.max(other.top);
        let right = self.right.min(other.right);
        let bottom = self.bottom.min(other.bottom);
        if left > right || top > bottom {
            Self::empty()
        } else {
            Self::new(left, top, right, bottom)
        }
    }

    /// Smallest box enclosing both operands.
    pub fn hull(&self, other: &Self) -> Self {
        Self::new(
            self.left.min(other.left),
            self.top.min(other.top),
            self.right.max(other.right),
            self.bottom.max(other.bottom),
        )
    }

    /// Non-strict inclusion of `inner` in `self`.
    pub fn contains(&self, inner: &Self) -> bool {
        inner.left >= self.left
            && inner.top >= self.top
            && inner.right <= self.right
            && inner.bottom <= self.bottom
    }

    /// Moves each side outward by its own margin (negative margins shrink).
    pub fn expand(&self, dx: T, dy: T) -> Self {
        Self::new(
            self.left - dx,
            self.top - dy,
            self.right + dx,
            self.bottom + dy,
        )
    }
}

pub fn area<T: Scalar>(b: &BoundingBox<T>) -> T {
    b.area()
}

pub fn intersect<T: Scalar>(b1: &BoundingBox<T>, b2: &BoundingBox<T>) -> BoundingBox<T> {
    b1.intersect(b2)
}

pub fn contains<T: Scalar>(outer: &BoundingBox<T>, inner: &BoundingBox<T>) -> bool {
    outer.contains(inner)
}

/// Asymmetric signed Hausdorff distance from a ground-truth box to a
/// prediction: the smallest additive margin that makes `pred` contain `gt`.
/// Negative when `pred` already strictly contains `gt`.
pub fn hausdorff_distance<T: Scalar>(gt: &BoundingBox<T>, pred: &BoundingBox<T>) -> T {
    (pred.left - gt.left)
        .max(pred.top - gt.top)
        .max(gt.right - pred.right)
        .max(gt.bottom - pred.bottom)
}

/// Generalized-IoU distance `1 - IoU + |hull \ union| / |hull|`, in `[0, 2]`.
pub fn giou_distance<T: Scalar>(b: &BoundingBox<T>, b_hat: &BoundingBox<T>) -> Result<T> {
    for (name, bx) in [("first", b), ("second", b_hat)] {
        if !(bx.area() > T::zero()) {
            return Err(Error::DegenerateBox(format!(
                "{name} GIoU operand has zero area: {:?}",
                <[T; 4]>::from(*bx)
            )));
        }
    }
    let inter = b.intersect(b_hat).area();
    let union = b.area() + b_hat.area() - inter;
    let hull = b.hull(b_hat).area();
    Ok(T::one() - inter / union + (hull - union) / hull)
}
