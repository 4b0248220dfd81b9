//! Parameter updates and the learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore};
use crate::harness::config::OptimizerKind;
use crate::tensor::Tensor;

/// Linear warm-up to `base`, then cosine decay to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`
/// (disabled when `max_norm <= 0`). Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut HashMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    step: u64,
    first: HashMap<usize, Vec<f32>>,
    second: HashMap<usize, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    /// One update of every parameter that received a gradient. Weight decay
    /// applies to parameters whose name does not end in `.bias`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = grads[&id].data();
            let decay = if store.name(id).ends_with(".bias") { 0.0 } else { self.weight_decay } as f32;
            let p = store.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = self.first.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
                    let mu = self.momentum as f32;
                    for ((w, &gi), v) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        let d = gi + decay * *w;
                        *v = mu * *v + d;
                        *w -= lr as f32 * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.momentum, 0.999f64, 1e-8f64);
                    let m = self.first.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - b1.powi(self.step as i32);
                    let c2 = 1.0 - b2.powi(self.step as i32);
                    for i in 0..g.len() {
                        let gi = g[i] as f64;
                        m[i] = (b1 * m[i] as f64 + (1.0 - b1) * gi) as f32;
                        v[i] = (b2 * v[i] as f64 + (1.0 - b2) * gi * gi) as f32;
                        let upd = (m[i] as f64 / c1) / ((v[i] as f64 / c2).sqrt() + eps);
                        p[i] -= (lr * (upd + decay as f64 * p[i] as f64)) as f32;
                    }
                }
            }
        }
    }
}
