//! A compact anchor-free one-stage detector.
//!
//! Layout (all convolutions followed by leaky ReLU unless noted):
//!
//! * backbone: three stride-2 3×3 convolutions, input → stride 8. Its output
//!   is the global feature map tapped for image-level alignment.
//! * neck: two more stride-2 3×3 convolutions (stride 16, 32), then a
//!   top-down pass of 1×1 lateral convolutions merged with upsampled coarser
//!   levels. The three merged maps (stride 8, 16, 32) are the instance
//!   features, ordered finest to coarsest.
//! * heads: one 1×1 convolution per scale emitting, per cell,
//!   `[tx, ty, tw, th, objectness, class logits...]` (no activation).

mod decode;
mod loss;

pub use decode::{decode, decode_grid, nms};
pub use loss::{
    assign_scale, encode_targets, supervised_loss, supervised_loss_with_grad, CellTarget,
    supervised_loss_tape, LossParts, LossWeights, ScaleTargets,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, ScaleSet, ScaleTag};
use crate::nn::{Conv2d, LEAKY_SLOPE};
use crate::raster::GrayImage;
use crate::tensor::Tensor;

/// Prior objectness logit for head initialisation (sigmoid ≈ 0.018).
pub const OBJECTNESS_PRIOR_LOGIT: f32 = -4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub class_count: usize,
    pub backbone_channels: usize,
    /// Instance-feature channels, ordered (large, medium, small) map.
    pub neck_channels: [usize; 3],
    /// Strides, ordered (large, medium, small) map.
    pub strides: [usize; 3],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 160,
            class_count: 3,
            backbone_channels: 32,
            neck_channels: [32, 48, 64],
            strides: [8, 16, 32],
        }
    }
}

impl DetectorConfig {
    pub fn with_classes(class_count: usize) -> Self {
        Self {
            class_count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if self.strides != [8, 16, 32] {
            return Err(Error::Config(format!(
                "the architecture fixes strides to (8, 16, 32), got {:?}",
                self.strides
            )));
        }
        if self.input_size == 0 || self.input_size % self.strides[2] != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size, self.strides[2]
            )));
        }
        if self.backbone_channels < 4 || self.neck_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts too small".into()));
        }
        Ok(())
    }

    /// Channels per cell in each head output.
    pub fn head_channels(&self) -> usize {
        5 + self.class_count
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.input_size / self.strides[scale]
    }
}

/// Head output of one scale for one image: `(5 + C) × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredGrid {
    pub stride: usize,
    pub data: Tensor,
}

impl PredGrid {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.data.data()[(ch * h + y) * w + x]
    }
}

/// Per-scale prediction grids ordered (large, medium, small) map.
pub type RawPredictions = Vec<PredGrid>;

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub global_features: FeatureMap,
    pub instance_features: ScaleSet,
    pub raw_predictions: RawPredictions,
}

/// Tape handles for a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorVars {
    /// N × backbone_channels × S/8 × S/8
    pub global: Var,
    /// Per scale N × C_s × H_s × W_s, ordered finest to coarsest.
    pub instance: [Var; 3],
    /// Per scale N × (5 + C) × H_s × W_s.
    pub heads: [Var; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    stem: [Conv2d; 3],
    down: [Conv2d; 2],
    lateral: [Conv2d; 3],
    top_down: [Conv2d; 2],
    heads: [Conv2d; 3],
}

impl Detector {
    /// Registers freshly initialised parameters in `store`.
    pub fn new(config: DetectorConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = config.backbone_channels;
        let [n_large, n_med, n_small] = config.neck_channels;
        let c1 = (bb / 4).max(4);
        let c2 = (bb / 2).max(4);
        let stem = [
            Conv2d::new(store, &mut rng, "backbone.stem0", 1, c1, 3, 2),
            Conv2d::new(store, &mut rng, "backbone.stem1", c1, c2, 3, 2),
            Conv2d::new(store, &mut rng, "backbone.stem2", c2, bb, 3, 2),
        ];
        let down = [
            Conv2d::new(store, &mut rng, "neck.down0", bb, n_med, 3, 2),
            Conv2d::new(store, &mut rng, "neck.down1", n_med, n_small, 3, 2),
        ];
        let lateral = [
            Conv2d::new(store, &mut rng, "neck.lateral0", bb, n_large, 1, 1),
            Conv2d::new(store, &mut rng, "neck.lateral1", n_med, n_med, 1, 1),
            Conv2d::new(store, &mut rng, "neck.lateral2", n_small, n_small, 1, 1),
        ];
        let top_down = [
            Conv2d::new(store, &mut rng, "neck.top_down0", n_med, n_large, 1, 1),
            Conv2d::new(store, &mut rng, "neck.top_down1", n_small, n_med, 1, 1),
        ];
        let hc = config.head_channels();
        let heads = [
            Conv2d::new(store, &mut rng, "head.large", n_large, hc, 1, 1),
            Conv2d::new(store, &mut rng, "head.medium", n_med, hc, 1, 1),
            Conv2d::new(store, &mut rng, "head.small", n_small, hc, 1, 1),
        ];
        for h in &heads {
            store.get_mut(h.bias).data_mut()[4] = OBJECTNESS_PRIOR_LOGIT;
        }
        Ok(Self {
            config,
            stem,
            down,
            lateral,
            top_down,
            heads,
        })
    }

    /// Batched forward on an `N × 1 × S × S` input.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> DetectorVars {
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(tape, store, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let global = h;
        let c4 = self.down[0].forward(tape, store, global);
        let c4 = tape.leaky_relu(c4, LEAKY_SLOPE);
        let c5 = self.down[1].forward(tape, store, c4);
        let c5 = tape.leaky_relu(c5, LEAKY_SLOPE);

        let p5 = self.lateral[2].forward(tape, store, c5);
        let p5 = tape.leaky_relu(p5, LEAKY_SLOPE);
        let p4 = {
            let lat = self.lateral[1].forward(tape, store, c4);
            let td = self.top_down[1].forward(tape, store, p5);
            let up = tape.upsample2x(td);
            let s = tape.add(lat, up);
            tape.leaky_relu(s, LEAKY_SLOPE)
        };
        let p3 = {
            let lat = self.lateral[0].forward(tape, store, global);
            let td = self.top_down[0].forward(tape, store, p4);
            let up = tape.upsample2x(td);
            let s = tape.add(lat, up);
            tape.leaky_relu(s, LEAKY_SLOPE)
        };
        let instance = [p3, p4, p5];
        let heads = [
            self.heads[0].forward(tape, store, p3),
            self.heads[1].forward(tape, store, p4),
            self.heads[2].forward(tape, store, p5),
        ];
        DetectorVars {
            global,
            instance,
            heads,
        }
    }

    /// Stacks images into an `N × 1 × S × S` tensor, checking their size.
    pub fn batch_tensor(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(Error::Shape(format!(
                    "image is {}×{}, detector expects {s}×{s}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        Ok(Tensor::from_vec(&[images.len(), 1, s, s], data))
    }

    /// Single-image inference returning every feature product.
    pub fn forward(&self, store: &ParamStore, image: &GrayImage) -> Result<DetectorOutput> {
        let x = self.batch_tensor(&[image])?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.forward_tape(&mut tape, store, xv);
        let global_features = FeatureMap::from_tensor(
            first_item(tape.value(vars.global)),
            ScaleTag::Large,
        )?;
        let maps: Vec<FeatureMap> = vars
            .instance
            .iter()
            .zip(ScaleTag::ALL)
            .map(|(&v, tag)| FeatureMap::from_tensor(first_item(tape.value(v)), tag))
            .collect::<Result<_>>()?;
        let [large, medium, small]: [FeatureMap; 3] = maps.try_into().expect("three scales");
        let instance_features = ScaleSet::new(large, medium, small)?;
        let raw_predictions = (0..3)
            .map(|s| PredGrid {
                stride: self.config.strides[s],
                data: first_item(tape.value(vars.heads[s])),
            })
            .collect();
        Ok(DetectorOutput {
            global_features,
            instance_features,
            raw_predictions,
        })
    }

    /// Batched inference returning per-image prediction grids.
    pub fn predict_batch(&self, store: &ParamStore, images: &[&GrayImage]) -> Result<Vec<RawPredictions>> {
        let x = self.batch_tensor(images)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.forward_tape(&mut tape, store, xv);
        Ok(split_heads(&tape, &vars, &self.config.strides, images.len()))
    }
}

/// Per-image prediction grids from batched head outputs.
pub fn split_heads(tape: &Tape, vars: &DetectorVars, strides: &[usize; 3], n: usize) -> Vec<RawPredictions> {
    (0..n)
        .map(|i| {
            (0..3)
                .map(|s| {
                    let t = tape.value(vars.heads[s]);
                    PredGrid {
                        stride: strides[s],
                        data: Tensor::from_vec(&t.shape()[1..], t.outer(i).to_vec()),
                    }
                })
                .collect()
        })
        .collect()
}

fn first_item(t: &Tensor) -> Tensor {
    Tensor::from_vec(&t.shape()[1..], t.outer(0).to_vec())
}
