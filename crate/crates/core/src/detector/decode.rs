use crate::geometry::{iou, BBox, Detection, DetectionSet};
use crate::ops::sigmoid;

use super::{PredGrid, RawPredictions};

/// Cell decode for grid cell `(gx, gy)` at `stride`, image side `size`:
///
/// ```text
/// cx = (gx + σ(tx)) · stride / size      w = exp(tw) · stride / size
/// cy = (gy + σ(ty)) · stride / size      h = exp(th) · stride / size
/// ```
///
/// Confidence is `σ(objectness) · σ(class logit)` for the best class.
pub fn decode_grid(grid: &PredGrid, conf_threshold: f32) -> Vec<Detection> {
    let (h, w) = (grid.height(), grid.width());
    let classes = grid.data.shape()[0] - 5;
    let stride = grid.stride as f32;
    let size = (w * grid.stride) as f32;
    let max_log = (size / stride).ln() + 1.0;
    let mut out = Vec::new();
    for gy in 0..h {
        for gx in 0..w {
            let obj = sigmoid(grid.at(4, gy, gx));
            let (best, p) = (0..classes)
                .map(|c| (c, sigmoid(grid.at(5 + c, gy, gx))))
                .fold((0, f32::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
            let conf = obj * p;
            if conf < conf_threshold {
                continue;
            }
            let cx = (gx as f32 + sigmoid(grid.at(0, gy, gx))) * stride / size;
            let cy = (gy as f32 + sigmoid(grid.at(1, gy, gx))) * stride / size;
            let bw = grid.at(2, gy, gx).min(max_log).exp() * stride / size;
            let bh = grid.at(3, gy, gx).min(max_log).exp() * stride / size;
            if let Some(bbox) = BBox::from_corners(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0) {
                out.push(Detection::new(best, bbox, conf));
            }
        }
    }
    out
}

/// Greedy per-class non-maximum suppression; result sorted by confidence.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f32) -> DetectionSet {
    // stable sort keeps scale/cell order among equal confidences
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

pub fn decode(raw: &RawPredictions, conf_threshold: f32, nms_iou: f32) -> DetectionSet {
    let all: Vec<Detection> = raw
        .iter()
        .flat_map(|g| decode_grid(g, conf_threshold))
        .collect();
    nms(all, nms_iou)
}
