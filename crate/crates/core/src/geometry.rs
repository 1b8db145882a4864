//! Axis-aligned boxes in pixel space.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// A box in pixel coordinates, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxPixels {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxPixels {
    fn from(a: [f64; 4]) -> Self {
        BoxPixels::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BoxPixels> for [f64; 4] {
    fn from(b: BoxPixels) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxPixels {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxPixels { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Checks `0 <= x1 < x2 <= w` and `0 <= y1 < y2 <= h`.
    pub fn validate(&self, w: f64, h: f64) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|c| c.is_finite());
        if !finite {
            return Err(validation(format!("non-finite box {:?}", self)));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(validation(format!("degenerate box {:?}", self)));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > w || self.y2 > h {
            return Err(validation(format!("box {:?} outside {}x{} image", self, w, h)));
        }
        Ok(())
    }

    /// Area of the intersection with `other`; zero when they only touch.
    pub fn intersection_area(&self, other: &BoxPixels) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// True when `self` lies strictly inside `other` on every side.
    pub fn strictly_inside(&self, other: &BoxPixels) -> bool {
        self.x1 > other.x1 && self.y1 > other.y1 && self.x2 < other.x2 && self.y2 < other.y2
    }
}
