use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates: center `(x, y)`, size `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validating constructor: positive size and nonempty intersection with the unit square.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::contract(format!("degenerate box {self:?}")));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= 1.0 || y0 >= 1.0 {
            return Err(Error::contract(format!("box {self:?} lies outside the image")));
        }
        Ok(())
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    /// Fraction of the `(row, col)` cell of a `grid`×`grid` partition covered by this box.
    pub fn cell_overlap(&self, row: usize, col: usize, grid: usize) -> f64 {
        let s = 1.0 / grid as f64;
        let cell = BoundingBox {
            x: (col as f64 + 0.5) * s,
            y: (row as f64 + 0.5) * s,
            w: s,
            h: s,
        };
        self.intersection(&cell) / (s * s)
    }

    /// Grid cell `(row, col)` containing the box center.
    pub fn center_cell(&self, grid: usize) -> (usize, usize) {
        let g = grid as f64;
        let clamp = |v: f64| ((v * g).floor().max(0.0) as usize).min(grid - 1);
        (clamp(self.y), clamp(self.x))
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}
