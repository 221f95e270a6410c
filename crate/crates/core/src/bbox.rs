//! Axis-aligned bounding boxes in [0,1] relative coordinates.

use serde::{Deserialize, Serialize};

/// Top-left / bottom-right corners relative to the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "box corners must be ordered");
        Self { x1, y1, x2, y2 }
    }

    pub fn zero() -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// True if `self` completely contains `other` (boundaries inclusive).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Bottom-midpoint, the ground contact proxy used by heuristics.
    pub fn bottom_mid(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, self.y2)
    }
}
