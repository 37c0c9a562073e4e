//! Axis-aligned boxes in normalized center-size form.

use serde::{Deserialize, Serialize};

/// Guard added to union and hull areas so degenerate boxes stay finite.
pub const AREA_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From a top-left `(x, y, width, height)` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Scales a normalized box to pixel units.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter + AREA_EPS;
    let hw = a.x2().max(b.x2()) - a.x1().min(b.x1());
    let hh = a.y2().max(b.y2()) - a.y1().min(b.y1());
    let hull = hw * hh + AREA_EPS;
    inter / union - (hull - union) / hull
}
