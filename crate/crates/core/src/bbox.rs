//! Axis-aligned boxes in `(x, y, w, h)` form.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Axis-aligned box with top-left corner `(x, y)`, width `w` and height `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bbox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> Bbox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    #[inline]
    pub fn x2(&self) -> T {
        self.x + self.w
    }

    #[inline]
    pub fn y2(&self) -> T {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Finite with strictly positive extent.
    pub fn is_proper(&self) -> bool {
        self.is_finite() && self.w > T::zero() && self.h > T::zero()
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    /// Smallest box containing both; exactly the larger box when one contains the other.
    pub fn enclosing(&self, other: &Self) -> Self {
        if self.contains(other) {
            return *self;
        }
        if other.contains(self) {
            return *other;
        }
        Self::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.x2().max(other.x2()),
            self.y2().max(other.y2()),
        )
    }

    /// Intersection over union, 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            return T::zero();
        }
        (inter / union).min(T::one())
    }

    /// Generalized IoU: IoU minus the empty fraction of the enclosing box.
    pub fn giou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.enclosing(other).area();
        if union <= T::zero() || hull <= T::zero() {
            return T::zero();
        }
        inter / union - (hull - union) / hull
    }

    /// Center form `(cx, cy, w, h)`.
    pub fn to_cxcywh(&self) -> [T; 4] {
        let half = T::lit(0.5);
        [self.x + half * self.w, self.y + half * self.h, self.w, self.h]
    }

    /// L1 distance between the center forms of two boxes.
    pub fn l1_cxcywh(&self, other: &Self) -> T {
        let a = self.to_cxcywh();
        let b = other.to_cxcywh();
        a.iter().zip(&b).fold(T::zero(), |acc, (&p, &q)| acc + (p - q).abs())
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x <= other.x && self.y <= other.y && other.x2() <= self.x2() && other.y2() <= self.y2()
    }

    /// Scales x/w by `sx` and y/h by `sy`.
    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    pub fn cast<U: Real>(&self) -> Bbox<U> {
        Bbox::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.w.as_f64()),
            U::lit(self.h.as_f64()),
        )
    }
}
