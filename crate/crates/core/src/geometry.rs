//! Normalized center-format boxes and detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates, center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        if !(in_unit(self.cx) && in_unit(self.cy)) {
            return Err(Error::InvalidBox(format!("center out of range: {self:?}")));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::InvalidBox(format!("extent out of range: {self:?}")));
        }
        let (x1, y1, x2, y2) = self.clipped_corners();
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!("zero area after clipping: {self:?}")));
        }
        Ok(())
    }

    /// Builds a box from corners, clipping to the unit square. Returns `None`
    /// when nothing of positive area remains.
    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Option<Self> {
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (x2, y2) = (x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        if x2 - x1 <= 1e-6 || y2 - y1 <= 1e-6 {
            return None;
        }
        Some(Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn clipped_corners(&self) -> (f32, f32, f32, f32) {
        let (x1, y1, x2, y2) = self.corners();
        (
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }
}

/// Intersection over union in normalized coordinates.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) as f64;
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0) as f64;
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    (inter / union).clamp(0.0, 1.0) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f32,
}

impl Detection {
    pub fn new(class_id: usize, bbox: BBox, confidence: f32) -> Self {
        Self {
            class_id,
            bbox,
            confidence,
        }
    }
}

/// Detections for one image.
pub type DetectionSet = Vec<Detection>;

/// Checks every detection against the configured class count.
pub fn validate_detections(dets: &[Detection], class_count: usize) -> Result<()> {
    for d in dets {
        if d.class_id >= class_count {
            return Err(Error::InvalidArgument(format!(
                "class id {} out of range for {} classes",
                d.class_id, class_count
            )));
        }
        d.bbox.validate()?;
    }
    Ok(())
}
