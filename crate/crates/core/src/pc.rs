//! Perceptual Consistency: a scale-weighted L1 distance between source and
//! target instance features.
//!
//! Scale index `i = 1..3` runs finest map → coarsest map and scale `i` is
//! divided by `w_i = 2^(3 − i)`, i.e. divisors (4, 2, 1). The coarsest map
//! therefore carries the largest weight.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::ScaleSet;
use crate::tensor::Tensor;

/// Divisors `w_i` for the (large, medium, small) map order.
pub const PC_WEIGHTS: [f64; 3] = [4.0, 2.0, 1.0];

pub fn pc_weight(scale_index: usize, scale_count: usize) -> f64 {
    2f64.powi((scale_count - 1 - scale_index) as i32)
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// `Σ_i (1/w_i) ‖F_S,i − F_T,i‖₁`. With `normalize`, each per-scale norm is
/// divided by that scale's element count.
pub fn pc_loss(fs: &ScaleSet, ft: &ScaleSet, normalize: bool) -> Result<f64> {
    let mut total = 0.0;
    for (i, (a, b)) in fs.maps().iter().zip(ft.maps()).enumerate() {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "scale {i}: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let mut d = l1(a.values(), b.values());
        if normalize {
            d /= a.values().len() as f64;
        }
        total += d / PC_WEIGHTS[i];
    }
    Ok(total)
}

/// Batched form on `N × C × H × W` instance features, averaged over the
/// batch (pairs are aligned by batch index).
pub fn pc_loss_tape(tape: &mut Tape, fs: &[Var; 3], ft: &[Var; 3], normalize: bool) -> Result<Var> {
    let mut total = 0.0;
    let mut grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(3);
    for i in 0..3 {
        let (a, b) = (tape.value(fs[i]), tape.value(ft[i]));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "scale {i}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.shape()[0].max(1) as f64;
        let denom = if normalize { a.numel().max(1) as f64 } else { n };
        let coef = 1.0 / (PC_WEIGHTS[i] * denom);
        total += l1(a.data(), b.data()) * coef;
        let sign: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let d = x - y;
                if d > 0.0 {
                    coef as f32
                } else if d < 0.0 {
                    -coef as f32
                } else {
                    0.0
                }
            })
            .collect();
        let ga = Tensor::from_vec(a.shape(), sign);
        let gb = ga.scale(-1.0);
        grads.push((ga, gb));
    }
    let inputs = [fs[0], fs[1], fs[2], ft[0], ft[1], ft[2]];
    Ok(tape.op(
        Tensor::scalar(total as f32),
        &inputs,
        Box::new(move |ctx| {
            let s = ctx.grad.item();
            let mut out: Vec<Option<Tensor>> = grads.iter().map(|g| Some(g.0.scale(s))).collect();
            out.extend(grads.iter().map(|g| Some(g.1.scale(s))));
            out
        }),
    ))
}
