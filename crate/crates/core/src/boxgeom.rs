//! Axis-aligned box representations, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centre/size form, normalized to image dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form. Touching edges enclose zero area (half-open intervals).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxCyWh { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxCxCyWh::new(a[0], a[1], a[2], a[3])
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn width(self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    /// Inverse conversion; fails on zero or negative extent.
    pub fn to_cxcywh(self) -> Result<BoxCxCyWh> {
        let w = self.x2 - self.x1;
        let h = self.y2 - self.y1;
        if w <= 0.0 || h <= 0.0 || !w.is_finite() || !h.is_finite() {
            return Err(Error::DegenerateBox(format!("{self:?}")));
        }
        Ok(BoxCxCyWh {
            cx: self.x1 + 0.5 * w,
            cy: self.y1 + 0.5 * h,
            w,
            h,
        })
    }

    pub fn scale(self, sx: f64, sy: f64) -> Self {
        BoxXyxy::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub giou: f64,
}

pub fn iou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    giou(a, b).iou
}

/// IoU and generalized IoU. Operand order never changes the result.
pub fn giou(a: BoxXyxy, b: BoxXyxy) -> Overlap {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    // a + b is commutative in IEEE arithmetic, so the result is symmetric.
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = cw.max(0.0) * ch.max(0.0);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    // The hull never has less area than the union; the clamp absorbs
    // rounding when the two are equal.
    let giou = if enclose > 0.0 {
        iou - ((enclose - union) / enclose).max(0.0)
    } else {
        iou
    };
    Overlap { iou, giou }
}
