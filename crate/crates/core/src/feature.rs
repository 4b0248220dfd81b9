//! Feature maps, scale sets and the vector helpers shared by the alignment
//! modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScaleTag {
    /// Finest map (stride 8).
    Large,
    Medium,
    /// Coarsest map (stride 32).
    Small,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 3] = [ScaleTag::Large, ScaleTag::Medium, ScaleTag::Small];

    pub fn index(self) -> usize {
        match self {
            ScaleTag::Large => 0,
            ScaleTag::Medium => 1,
            ScaleTag::Small => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleTag::Large => "large",
            ScaleTag::Medium => "medium",
            ScaleTag::Small => "small",
        }
    }
}

/// A C×H×W activation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Tensor,
    pub scale: ScaleTag,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, scale: ScaleTag) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be positive, got {channels}×{height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}×{height}×{width} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map has non-finite entries".into()));
        }
        Ok(Self {
            data: Tensor::from_vec(&[channels, height, width], data),
            scale,
        })
    }

    pub fn from_tensor(t: Tensor, scale: ScaleTag) -> Result<Self> {
        let s = t.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected rank-3 tensor, got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], t.into_data(), scale)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, scale: ScaleTag) -> Self {
        Self {
            data: Tensor::full(&[channels, height, width], value),
            scale,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.data.data()[c * plane..(c + 1) * plane]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn values(&self) -> &[f32] {
        self.data.data()
    }

    /// Row-major (channel, row, column) flattening.
    pub fn flatten(&self) -> Vec<f32> {
        self.data.data().to_vec()
    }

    /// Inverse of [`FeatureMap::flatten`].
    pub fn unflatten(v: &[f32], channels: usize, height: usize, width: usize, scale: ScaleTag) -> Result<Self> {
        Self::new(channels, height, width, v.to_vec(), scale)
    }
}

/// The three instance-feature maps ordered finest to coarsest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    maps: [FeatureMap; 3],
}

impl ScaleSet {
    pub fn new(large: FeatureMap, medium: FeatureMap, small: FeatureMap) -> Result<Self> {
        if !(large.height() > medium.height() && medium.height() > small.height()) {
            return Err(Error::Shape(format!(
                "scale heights must strictly decrease, got {} / {} / {}",
                large.height(),
                medium.height(),
                small.height()
            )));
        }
        let mut maps = [large, medium, small];
        for (m, tag) in maps.iter_mut().zip(ScaleTag::ALL) {
            m.scale = tag;
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[FeatureMap; 3] {
        &self.maps
    }

    pub fn get(&self, tag: ScaleTag) -> &FeatureMap {
        &self.maps[tag.index()]
    }
}

/// `1 − u·v / (‖u‖‖v‖)`; exactly one zero vector gives 1.0.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine distance between lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    match (nu == 0.0, nv == 0.0) {
        (true, true) => Err(Error::DegenerateEmbedding),
        (true, false) | (false, true) => Ok(1.0),
        _ => Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0)),
    }
}

pub fn squared_euclidean(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum()
}
