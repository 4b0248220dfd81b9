//! Box-to-feature region pooling.
//!
//! A box is mapped onto the feature grid of its assigned scale, where cell
//! `(y, x)` covers `[x, x+1) × [y, y+1)`. The box is split into `P × P` equal
//! bins and each bin takes the area-weighted mean of the cells it overlaps,
//! so one bin over the whole box is exactly the coverage-weighted mean.

use crate::autograd::{Tape, Var};
use crate::detector::{assign_scale, DetectorConfig};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, ScaleSet, ScaleTag};
use crate::geometry::{BBox, Detection};
use crate::tensor::Tensor;

/// Minimum box extent, in feature cells, below which an instance is dropped.
const MIN_EXTENT: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCrop {
    /// Index into the detection list.
    pub detection: usize,
    /// Scale index (0 = finest map).
    pub scale: usize,
    pub crop: FeatureMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub crops: Vec<InstanceCrop>,
    pub dropped: usize,
}

/// Per-bin `(cell, weight)` lists along one axis; weights in a bin sum to 1.
fn axis_bins(lo: f32, hi: f32, bins: usize, cells: usize) -> Vec<Vec<(usize, f32)>> {
    let bw = (hi - lo) / bins as f32;
    (0..bins)
        .map(|b| {
            let s = lo + b as f32 * bw;
            let e = s + bw;
            let first = (s.floor() as usize).min(cells - 1);
            let last = ((e.ceil() as usize).max(first + 1)).min(cells);
            (first..last)
                .filter_map(|c| {
                    let ov = (e.min(c as f32 + 1.0) - s.max(c as f32)).max(0.0);
                    (ov > 0.0).then_some((c, ov / bw))
                })
                .collect()
        })
        .collect()
}

/// Pooling plan for a box on an `H × W` grid, or `None` if degenerate.
struct PoolPlan {
    ys: Vec<Vec<(usize, f32)>>,
    xs: Vec<Vec<(usize, f32)>>,
}

impl PoolPlan {
    fn new(bbox: &BBox, height: usize, width: usize, pool: usize) -> Option<Self> {
        let (x1, y1, x2, y2) = bbox.clipped_corners();
        let (fx1, fx2) = (x1 * width as f32, x2 * width as f32);
        let (fy1, fy2) = (y1 * height as f32, y2 * height as f32);
        if fx2 - fx1 < MIN_EXTENT || fy2 - fy1 < MIN_EXTENT {
            return None;
        }
        Some(Self {
            ys: axis_bins(fy1, fy2, pool, height),
            xs: axis_bins(fx1, fx2, pool, width),
        })
    }

    /// Pools a `C × H × W` block into `C × P × P`.
    fn apply(&self, src: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
        let pool = self.ys.len();
        let mut out = vec![0.0; channels * pool * pool];
        for c in 0..channels {
            let plane = &src[c * height * width..(c + 1) * height * width];
            for (py, ybin) in self.ys.iter().enumerate() {
                for (px, xbin) in self.xs.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for &(y, wy) in ybin {
                        for &(x, wx) in xbin {
                            acc += (wy * wx) as f64 * plane[y * width + x] as f64;
                        }
                    }
                    out[(c * pool + py) * pool + px] = acc as f32;
                }
            }
        }
        out
    }

    /// Adjoint of [`PoolPlan::apply`], accumulating into `dst`.
    fn scatter(&self, grad: &[f32], channels: usize, height: usize, width: usize, dst: &mut [f32]) {
        let pool = self.ys.len();
        for c in 0..channels {
            let plane = &mut dst[c * height * width..(c + 1) * height * width];
            for (py, ybin) in self.ys.iter().enumerate() {
                for (px, xbin) in self.xs.iter().enumerate() {
                    let g = grad[(c * pool + py) * pool + px];
                    for &(y, wy) in ybin {
                        for &(x, wx) in xbin {
                            plane[y * width + x] += wy * wx * g;
                        }
                    }
                }
            }
        }
    }
}

/// Pools every detection from the scale its size assigns it to.
pub fn extract_instances(
    features: &ScaleSet,
    detections: &[Detection],
    pool: usize,
    cfg: &DetectorConfig,
) -> Result<Extraction> {
    if pool == 0 {
        return Err(Error::InvalidArgument("pool size must be at least 1".into()));
    }
    let mut out = Extraction::default();
    for (i, det) in detections.iter().enumerate() {
        let scale = assign_scale(det, cfg);
        let map = &features.maps()[scale];
        let (c, h, w) = map.dims();
        match PoolPlan::new(&det.bbox, h, w, pool) {
            Some(plan) => {
                let data = plan.apply(map.values(), c, h, w);
                out.crops.push(InstanceCrop {
                    detection: i,
                    scale,
                    crop: FeatureMap::new(c, pool, pool, data, ScaleTag::ALL[scale])?,
                });
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

/// Pools one box out of sample `sample` of an `N × C × H × W` batch.
/// Returns a `C × P × P` node, or `None` if the box is degenerate.
pub fn roi_pool_tape(tape: &mut Tape, features: Var, sample: usize, bbox: &BBox, pool: usize) -> Option<Var> {
    let shape = tape.shape(features).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plan = PoolPlan::new(bbox, h, w, pool)?;
    let data = plan.apply(tape.value(features).outer(sample), c, h, w);
    Some(tape.op(
        Tensor::from_vec(&[c, pool, pool], data),
        &[features],
        Box::new(move |ctx| {
            let mut g = Tensor::zeros(&shape);
            plan.scatter(ctx.grad.data(), c, h, w, g.outer_mut(sample));
            vec![Some(g)]
        }),
    ))
}
