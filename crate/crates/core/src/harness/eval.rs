//! Mean average precision at an IoU threshold, with all-point
//! interpolation of the precision envelope.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};
use crate::harness::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    /// `None` when the class has no ground truth in the split.
    pub ap: Option<f64>,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub images: usize,
    pub detection_count: usize,
    pub ground_truth_count: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub map_iou: f64,
    pub per_class: Vec<ClassReport>,
    /// Mean AP over classes present in the ground truth.
    pub map: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Area under the precision envelope for detections given as
/// `(confidence, is_true_positive)`, against `ground_truth` positives.
pub fn average_precision(scored: &[(f32, bool)], ground_truth: usize) -> Option<f64> {
    if ground_truth == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(sorted.len());
    for (k, &(_, hit)) in sorted.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / ground_truth as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: precision at recall r is the best precision at any recall ≥ r
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        let lower = if i == 0 { 0.0 } else { points[i - 1].0 };
        ap += (points[i].0 - lower) * best;
    }
    Some(ap)
}

/// Greedy confidence-ordered matching of one class's detections to the
/// best-overlapping unmatched ground truth in the same image.
pub fn match_class(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<Detection>],
    class_id: usize,
    map_iou: f64,
) -> (Vec<(f32, bool)>, usize) {
    let mut dets: Vec<(usize, &Detection)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let gts: Vec<Vec<&Detection>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|d| d.class_id == class_id).collect())
        .collect();
    let total_gt = gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let scored = dets
        .into_iter()
        .map(|(img, d)| {
            let mut best: Option<(f32, usize)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if taken[img][j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o as f64 >= map_iou && best.map_or(true, |(b, _)| o > b) {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[img][j] = true;
                    (d.confidence, true)
                }
                None => (d.confidence, false),
            }
        })
        .collect();
    (scored, total_gt)
}

/// Per-class reports and mAP for predictions against ground truth.
pub fn evaluate_predictions(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<Detection>],
    classes: &[String],
    map_iou: f64,
) -> Result<(Vec<ClassReport>, f64)> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let per_class: Vec<ClassReport> = classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let (scored, gt) = match_class(predictions, ground_truth, c, map_iou);
            ClassReport {
                class_id: c,
                name: name.clone(),
                ap: average_precision(&scored, gt),
                ground_truth: gt,
                detections: scored.len(),
                true_positives: scored.iter().filter(|s| s.1).count(),
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per_class, map))
}

pub fn evaluate(model: &Model, images: &[LabeledImage], conf_threshold: f64, nms_iou: f64, map_iou: f64) -> Result<EvalReport> {
    if let Some(i) = images.iter().position(|im| im.unlabeled) {
        return Err(Error::Data(format!("evaluation split must be labeled (image {i} has no labels)")));
    }
    let refs: Vec<_> = images.iter().map(|i| &i.image).collect();
    let preds = model.predict(&refs, conf_threshold as f32, nms_iou as f32)?;
    let gts: Vec<Vec<Detection>> = images.iter().map(|i| i.detections.clone()).collect();
    let (per_class, map) = evaluate_predictions(&preds, &gts, &model.classes, map_iou)?;
    Ok(EvalReport {
        method: model.config.method.name().to_string(),
        seed: model.config.seed,
        config_fingerprint: model.config.fingerprint(),
        images: images.len(),
        detection_count: preds.iter().map(Vec::len).sum(),
        ground_truth_count: gts.iter().map(Vec::len).sum(),
        conf_threshold,
        nms_iou,
        map_iou,
        per_class,
        map,
    })
}
