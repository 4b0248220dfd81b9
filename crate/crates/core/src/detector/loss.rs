//! Supervised detection loss.
//!
//! Each ground-truth box is assigned to exactly one cell: the scale whose
//! reference size `2 · stride` is closest (in log space) to the box's larger
//! side, and the cell containing the box center. Encoded targets are
//! `(ox, oy, ln(w/stride), ln(h/stride))` with `ox, oy ∈ [0, 1)` the center
//! offset inside the cell; predictions are compared as
//! `(σ(tx), σ(ty), tw, th)` under smooth-L1. Objectness uses binary
//! cross-entropy on every cell; classification uses per-class binary
//! cross-entropy on assigned cells only.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::geometry::Detection;
use crate::ops::sigmoid_f64;
use crate::tensor::Tensor;

use super::{DetectorConfig, RawPredictions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub boxes: f64,
    pub objectness: f64,
    pub classes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boxes: 5.0,
            objectness: 1.0,
            classes: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub boxes: f64,
    pub objectness: f64,
    pub classes: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.boxes * self.boxes + w.objectness * self.objectness + w.classes * self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    pub offset_x: f64,
    pub offset_y: f64,
    pub log_w: f64,
    pub log_h: f64,
}

/// Row-major `H × W` cell targets for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<CellTarget>>,
}

pub fn assign_scale(det: &Detection, cfg: &DetectorConfig) -> usize {
    let side = det.bbox.w.max(det.bbox.h) as f64 * cfg.input_size as f64;
    (0..3)
        .min_by(|&a, &b| {
            let da = (side / (2.0 * cfg.strides[a] as f64)).log2().abs();
            let db = (side / (2.0 * cfg.strides[b] as f64)).log2().abs();
            da.total_cmp(&db)
        })
        .expect("three scales")
}

/// Encodes ground truth for one image. When two boxes land on the same cell
/// the first one listed keeps it.
pub fn encode_targets(gt: &[Detection], cfg: &DetectorConfig) -> [ScaleTargets; 3] {
    let mut out: [ScaleTargets; 3] = std::array::from_fn(|s| {
        let n = cfg.grid_size(s);
        ScaleTargets {
            height: n,
            width: n,
            cells: vec![None; n * n],
        }
    });
    let size = cfg.input_size as f64;
    for det in gt {
        let s = assign_scale(det, cfg);
        let stride = cfg.strides[s] as f64;
        let n = out[s].width;
        let px = det.bbox.cx as f64 * size / stride;
        let py = det.bbox.cy as f64 * size / stride;
        let gx = (px.floor() as usize).min(n - 1);
        let gy = (py.floor() as usize).min(n - 1);
        let cell = &mut out[s].cells[gy * n + gx];
        if cell.is_some() {
            continue;
        }
        *cell = Some(CellTarget {
            class_id: det.class_id,
            offset_x: (px - gx as f64).clamp(0.0, 1.0),
            offset_y: (py - gy as f64).clamp(0.0, 1.0),
            log_w: (det.bbox.w as f64 * size / stride).ln(),
            log_h: (det.bbox.h as f64 * size / stride).ln(),
        });
    }
    out
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Binary cross-entropy on a logit, with its derivative.
fn bce_logit(x: f64, t: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    (loss, sigmoid_f64(x) - t)
}

/// Loss parts for one scale of one image; accumulates d(weighted total)
/// into `grad` when given.
fn scale_loss(
    pred: &[f32],
    targets: &ScaleTargets,
    classes: usize,
    w: &LossWeights,
    mut grad: Option<&mut [f32]>,
) -> LossParts {
    let plane = targets.height * targets.width;
    let mut parts = LossParts::default();
    let at = |ch: usize, cell: usize| pred[ch * plane + cell] as f64;
    for cell in 0..plane {
        let target = targets.cells[cell];
        let (l, g) = bce_logit(at(4, cell), if target.is_some() { 1.0 } else { 0.0 });
        parts.objectness += l;
        if let Some(gr) = grad.as_deref_mut() {
            gr[4 * plane + cell] += (w.objectness * g) as f32;
        }
        let Some(t) = target else { continue };
        let sx = sigmoid_f64(at(0, cell));
        let sy = sigmoid_f64(at(1, cell));
        let terms = [
            (0, sx - t.offset_x, sx * (1.0 - sx)),
            (1, sy - t.offset_y, sy * (1.0 - sy)),
            (2, at(2, cell) - t.log_w, 1.0),
            (3, at(3, cell) - t.log_h, 1.0),
        ];
        for (ch, d, chain) in terms {
            let (l, g) = smooth_l1(d);
            parts.boxes += l;
            if let Some(gr) = grad.as_deref_mut() {
                gr[ch * plane + cell] += (w.boxes * g * chain) as f32;
            }
        }
        for c in 0..classes {
            let tc = if c == t.class_id { 1.0 } else { 0.0 };
            let (l, g) = bce_logit(at(5 + c, cell), tc);
            parts.classes += l;
            if let Some(gr) = grad.as_deref_mut() {
                gr[(5 + c) * plane + cell] += (w.classes * g) as f32;
            }
        }
    }
    parts
}

fn add_parts(a: &mut LossParts, b: LossParts) {
    a.boxes += b.boxes;
    a.objectness += b.objectness;
    a.classes += b.classes;
}

/// Loss of one image's predictions against its ground truth.
pub fn supervised_loss(raw: &RawPredictions, gt: &[Detection], cfg: &DetectorConfig) -> LossParts {
    let targets = encode_targets(gt, cfg);
    let mut parts = LossParts::default();
    for (grid, t) in raw.iter().zip(&targets) {
        add_parts(
            &mut parts,
            scale_loss(grid.data.data(), t, cfg.class_count, &LossWeights::default(), None),
        );
    }
    parts
}

/// Like [`supervised_loss`] but also returns d(weighted total)/d(grid) per scale.
pub fn supervised_loss_with_grad(
    raw: &RawPredictions,
    gt: &[Detection],
    cfg: &DetectorConfig,
    w: &LossWeights,
) -> (LossParts, Vec<Tensor>) {
    let targets = encode_targets(gt, cfg);
    let mut parts = LossParts::default();
    let mut grads = Vec::with_capacity(3);
    for (grid, t) in raw.iter().zip(&targets) {
        let mut g = Tensor::zeros(grid.data.shape());
        add_parts(
            &mut parts,
            scale_loss(grid.data.data(), t, cfg.class_count, w, Some(g.data_mut())),
        );
        grads.push(g);
    }
    (parts, grads)
}

/// Mean supervised loss over a batch, recorded on the tape.
/// `heads[s]` has shape `N × (5 + C) × H_s × W_s`.
pub fn supervised_loss_tape(
    tape: &mut Tape,
    heads: &[Var; 3],
    ground_truth: &[&[Detection]],
    cfg: &DetectorConfig,
    w: &LossWeights,
) -> (Var, LossParts) {
    let n = ground_truth.len();
    let mut parts = LossParts::default();
    let mut grads: Vec<Tensor> = heads.iter().map(|&h| Tensor::zeros(tape.shape(h))).collect();
    for (i, gt) in ground_truth.iter().enumerate() {
        let targets = encode_targets(gt, cfg);
        for s in 0..3 {
            let pred = tape.value(heads[s]).outer(i);
            let p = scale_loss(pred, &targets[s], cfg.class_count, w, Some(grads[s].outer_mut(i)));
            add_parts(&mut parts, p);
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    parts.boxes *= inv;
    parts.objectness *= inv;
    parts.classes *= inv;
    for g in &mut grads {
        *g = g.scale(inv as f32);
    }
    let value = Tensor::scalar(parts.total(w) as f32);
    let var = tape.op(
        value,
        heads,
        Box::new(move |ctx| {
            let s = ctx.grad.item();
            grads.iter().map(|g| Some(g.scale(s))).collect()
        }),
    );
    (var, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::PredGrid;
    use crate::geometry::BBox;

    fn cfg() -> DetectorConfig {
        DetectorConfig::with_classes(2)
    }

    fn constant_grids(cfg: &DetectorConfig, obj: f32) -> RawPredictions {
        (0..3)
            .map(|s| {
                let n = cfg.grid_size(s);
                let mut t = Tensor::zeros(&[cfg.head_channels(), n, n]);
                for v in &mut t.data_mut()[4 * n * n..5 * n * n] {
                    *v = obj;
                }
                PredGrid {
                    stride: cfg.strides[s],
                    data: t,
                }
            })
            .collect()
    }

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    #[test]
    fn empty_ground_truth_with_confident_background() {
        let c = cfg();
        let raw = constant_grids(&c, -20.0);
        let loss = supervised_loss(&raw, &[], &c).total(&LossWeights::default());
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn exact_predictions_zero_box_and_class_terms() {
        let c = cfg();
        let gt = [Detection::new(1, BBox::new(0.33, 0.61, 0.1, 0.12).unwrap(), 1.0)];
        let targets = encode_targets(&gt, &c);
        let mut raw = constant_grids(&c, -30.0);
        for s in 0..3 {
            let plane = targets[s].height * targets[s].width;
            for (cell, t) in targets[s].cells.iter().enumerate() {
                let Some(t) = t else { continue };
                let d = raw[s].data.data_mut();
                d[cell] = logit(t.offset_x);
                d[plane + cell] = logit(t.offset_y);
                d[2 * plane + cell] = t.log_w as f32;
                d[3 * plane + cell] = t.log_h as f32;
                d[4 * plane + cell] = 30.0;
                d[5 * plane + cell] = -30.0;
                d[6 * plane + cell] = 30.0;
            }
        }
        let parts = supervised_loss(&raw, &gt, &c);
        assert!(parts.boxes < 1e-9, "{parts:?}");
        assert!(parts.classes < 1e-9, "{parts:?}");
        assert!(parts.objectness < 1e-9, "{parts:?}");
    }

    #[test]
    fn scale_assignment_follows_box_size() {
        let c = DetectorConfig::default();
        let small = Detection::new(0, BBox::new(0.5, 0.5, 0.08, 0.08).unwrap(), 1.0);
        let mid = Detection::new(0, BBox::new(0.5, 0.5, 0.2, 0.15).unwrap(), 1.0);
        let big = Detection::new(0, BBox::new(0.5, 0.5, 0.45, 0.3).unwrap(), 1.0);
        assert_eq!(assign_scale(&small, &c), 0);
        assert_eq!(assign_scale(&mid, &c), 1);
        assert_eq!(assign_scale(&big, &c), 2);
    }

    #[test]
    fn analytic_grid_gradient_matches_finite_difference() {
        let c = cfg();
        let gt = [
            Detection::new(0, BBox::new(0.3, 0.4, 0.1, 0.1).unwrap(), 1.0),
            Detection::new(1, BBox::new(0.7, 0.6, 0.3, 0.25).unwrap(), 1.0),
        ];
        let mut raw = constant_grids(&c, -1.0);
        for g in raw.iter_mut() {
            for (i, v) in g.data.data_mut().iter_mut().enumerate() {
                *v += ((i * 13) % 7) as f32 * 0.1 - 0.3;
            }
        }
        let w = LossWeights::default();
        let (_, grads) = supervised_loss_with_grad(&raw, &gt, &c, &w);
        let targets = encode_targets(&gt, &c);
        for s in 0..3 {
            let plane = targets[s].height * targets[s].width;
            let Some(cell) = targets[s].cells.iter().position(|t| t.is_some()) else {
                continue;
            };
            for ch in 0..c.head_channels() {
                let idx = ch * plane + cell;
                let h = 1e-3f32;
                let mut p = raw.clone();
                p[s].data.data_mut()[idx] += h;
                let mut m = raw.clone();
                m[s].data.data_mut()[idx] -= h;
                let fd = (supervised_loss(&p, &gt, &c).total(&w) - supervised_loss(&m, &gt, &c).total(&w))
                    / (2.0 * h as f64);
                let an = grads[s].data()[idx] as f64;
                assert!((fd - an).abs() < 1e-2 * fd.abs().max(1e-1), "s{s} ch{ch}: {fd} vs {an}");
            }
        }
    }
}
