//! Ground-truth and detection box types in normalized image coordinates.

use crate::error::{Error, Result};

/// Axis-aligned box: class id plus normalized center/size, all in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    pub fn validate(&self) -> Result<()> {
        let ok_center = (0.0..=1.0).contains(&self.cx) && (0.0..=1.0).contains(&self.cy);
        if !ok_center || self.w <= 0.0 || self.h <= 0.0 || self.w > 1.0 || self.h > 1.0 {
            return Err(Error::InvalidArg(format!(
                "degenerate box: cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Intersection over union of two boxes given as (x1, y1, x2, y2).
pub fn iou_corners(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_det_gt(d: &Detection, g: &GtBox) -> f64 {
    iou_corners(d.corners(), g.corners())
}

pub fn iou_gt(a: &GtBox, b: &GtBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}
