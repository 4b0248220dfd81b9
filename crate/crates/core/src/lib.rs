//! Unsupervised domain adaptation for one-stage terrain detection.
//!
//! The crate bundles a small multi-scale detector, the alignment losses that
//! attach to its global and instance features, a procedural terrain
//! generator with a controllable domain gap, and the training/evaluation
//! harness driving them.

pub mod autograd;
pub mod data;
pub mod cluster;
pub mod detector;
pub mod error;
pub mod feature;
pub mod feature_vsa;
pub mod geometry;
pub mod global_align;
pub mod harness;
pub mod instance_vsa;
pub mod nn;
pub mod ops;
pub mod pc;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
pub use feature::{cosine_distance, FeatureMap, ScaleSet, ScaleTag};
pub use geometry::{iou, BBox, Detection, DetectionSet};
pub use raster::GrayImage;
