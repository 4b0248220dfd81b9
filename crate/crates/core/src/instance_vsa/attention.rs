//! Channel attention and Strong Feature Filtering.
//!
//! Channel weights are `σ(conv1d(gap(F)))`: the spatial mean of every
//! channel, convolved along the channel axis with a small odd kernel
//! (zero padded), squashed by a sigmoid. Filtering scales each channel by
//! its weight and keeps the top `ceil(keep · C)` channels in rank order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::ops::sigmoid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRanking {
    /// Per-channel weight in (0, 1).
    pub weights: Vec<f32>,
    /// Channel indices by descending weight, ties to the lower index.
    pub order: Vec<usize>,
}

impl ChannelRanking {
    pub fn from_weights(weights: Vec<f32>) -> Self {
        let order = rank_order(&weights);
        Self { weights, order }
    }
}

pub fn rank_order(weights: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    order
}

/// `ceil(keep · channels)`, at least one.
pub fn keep_count(channels: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * channels as f64 - 1e-9).ceil() as usize).clamp(1, channels)
}

fn check_fraction(keep_fraction: f64) -> Result<()> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )))
    }
}

pub fn channel_means(f: &FeatureMap) -> Vec<f32> {
    (0..f.channels())
        .map(|c| {
            let ch = f.channel(c);
            (ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64) as f32
        })
        .collect()
}

pub fn channel_attention(f: &FeatureMap, kernel: &[f32], bias: f32) -> Result<ChannelRanking> {
    if kernel.len() % 2 == 0 {
        return Err(Error::InvalidArgument("attention kernel size must be odd".into()));
    }
    let gap = channel_means(f);
    let c = gap.len();
    let half = (kernel.len() / 2) as isize;
    let weights = (0..c)
        .map(|i| {
            let mut acc = bias;
            for (j, &k) in kernel.iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    acc += k * gap[src as usize];
                }
            }
            sigmoid(acc)
        })
        .collect();
    Ok(ChannelRanking::from_weights(weights))
}

pub fn sff_filter(f: &FeatureMap, ranking: &ChannelRanking, keep_fraction: f64) -> Result<FeatureMap> {
    check_fraction(keep_fraction)?;
    let (c, h, w) = f.dims();
    if ranking.weights.len() != c {
        return Err(Error::Shape(format!(
            "{} channel weights for {c} channels",
            ranking.weights.len()
        )));
    }
    let k = keep_count(c, keep_fraction);
    let mut data = Vec::with_capacity(k * h * w);
    for &ch in &ranking.order[..k] {
        let wt = ranking.weights[ch];
        data.extend(f.channel(ch).iter().map(|&v| v * wt));
    }
    FeatureMap::new(k, h, w, data, f.scale)
}

/// Learned channel-attention kernel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelAttention {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument("attention kernel size must be odd".into()));
        }
        let bound = (3.0 / kernel_size as f32).sqrt();
        let k: Vec<f32> = (0..kernel_size).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), Tensor::from_vec(&[kernel_size], k)),
            bias: store.add(format!("{name}.bias"), Tensor::scalar(0.0)),
        })
    }

    /// Weights for a `C × H × W` node, as a length-`C` node.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gap = tape.global_avg_pool(x);
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let z = tape.conv1d_channels(gap, k, b);
        tape.sigmoid(z)
    }

    pub fn ranking(&self, store: &ParamStore, f: &FeatureMap) -> Result<ChannelRanking> {
        channel_attention(f, store.get(self.kernel).data(), store.get(self.bias).item())
    }
}

/// Differentiable filtering of a `C × H × W` node by a length-`C` weight node;
/// the selection itself is treated as constant.
pub fn sff_tape(tape: &mut Tape, x: Var, weights: Var, keep_fraction: f64) -> Var {
    let shape = tape.shape(x).to_vec();
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let wv = tape.value(weights).data().to_vec();
    let order = rank_order(&wv);
    let k = keep_count(c, keep_fraction);
    let selected: Vec<usize> = order[..k].to_vec();
    let xv = tape.value(x).data();
    let mut data = Vec::with_capacity(k * plane);
    for &ch in &selected {
        data.extend(xv[ch * plane..(ch + 1) * plane].iter().map(|&v| v * wv[ch]));
    }
    tape.op(
        Tensor::from_vec(&[k, shape[1], shape[2]], data),
        &[x, weights],
        Box::new(move |ctx| {
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad.data();
            let mut gx = vec![0.0; c * plane];
            let mut gw = vec![0.0; c];
            for (slot, &ch) in selected.iter().enumerate() {
                let go = &g[slot * plane..(slot + 1) * plane];
                let src = &xv[ch * plane..(ch + 1) * plane];
                for p in 0..plane {
                    gx[ch * plane + p] += go[p] * wv[ch];
                    gw[ch] += go[p] * src[p];
                }
            }
            vec![
                Some(Tensor::from_vec(&shape, gx)),
                Some(Tensor::from_vec(&[c], gw)),
            ]
        }),
    )
}
