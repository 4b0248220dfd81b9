//! Synthetic terrain datasets: scene rendering, named recipes and the
//! on-disk layout (PNG images, one `class cx cy w h` line per object and a
//! JSON manifest).

mod io;
mod render;

pub use io::{quantize_box, read_dataset, read_manifest, write_dataset, Manifest, ManifestItem, SplitEntry, MANIFEST_FILE};
pub use render::{gaussian_blur, layout, render, LabeledImage, Rendered, SceneSpec, Shape, ShiftParams, TerrainClass};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_align::DomainLabel;

pub const SOURCE_TRAIN: &str = "source_train";
pub const TARGET_TRAIN: &str = "target_train";
pub const TARGET_TEST: &str = "target_test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub classes: Vec<TerrainClass>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub source_shift: ShiftParams,
    pub target_shift: ShiftParams,
}

impl Recipe {
    pub fn named(name: &str) -> Result<Self> {
        let classes = match name {
            "mini-mars" => vec![TerrainClass::Crater, TerrainClass::Dune, TerrainClass::Mountain],
            "mini-asteroid" => vec![TerrainClass::Boulder],
            other => {
                return Err(Error::Config(format!(
                    "unknown recipe `{other}` (expected mini-mars or mini-asteroid)"
                )))
            }
        };
        let (min_objects, max_objects) = if classes.len() == 1 { (3, 8) } else { (2, 5) };
        Ok(Self {
            name: name.to_string(),
            classes,
            min_objects,
            max_objects,
            image_size: 160,
            source_train: 400,
            target_train: 400,
            target_test: 100,
            source_shift: ShiftParams::source(),
            target_shift: ShiftParams::target(),
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn with_sizes(mut self, source_train: usize, target_train: usize, target_test: usize) -> Self {
        self.source_train = source_train;
        self.target_train = target_train;
        self.target_test = target_test;
        self
    }

    /// Scene spec for image `index` of `split` under dataset seed `seed`.
    /// Source and target training splits share scene geometry; the test
    /// split draws from a disjoint seed range.
    pub fn scene(&self, split: &str, seed: u64, index: usize) -> Result<SceneSpec> {
        let (offset, domain, shift) = match split {
            SOURCE_TRAIN => (0u64, DomainLabel::Source, self.source_shift),
            TARGET_TRAIN => (0, DomainLabel::Target, self.target_shift),
            TARGET_TEST => (2 << 20, DomainLabel::Target, self.target_shift),
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        };
        Ok(SceneSpec {
            seed: seed.wrapping_mul(1 << 24).wrapping_add(offset + index as u64),
            domain,
            classes: self.classes.clone(),
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            shift,
        })
    }

    pub fn split_len(&self, split: &str) -> Result<usize> {
        match split {
            SOURCE_TRAIN => Ok(self.source_train),
            TARGET_TRAIN => Ok(self.target_train),
            TARGET_TEST => Ok(self.target_test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn render_split(&self, split: &str, seed: u64) -> Result<(Vec<LabeledImage>, usize)> {
        let mut images = Vec::new();
        let mut failures = 0;
        for i in 0..self.split_len(split)? {
            let r = render(&self.scene(split, seed, i)?, self.image_size)?;
            failures += r.placement_failures;
            images.push(r.scene);
        }
        Ok((images, failures))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateSummary {
    pub images: usize,
    pub objects: usize,
    pub placement_failures: usize,
}

/// Renders and writes all three splits of a recipe under `dir`.
pub fn generate(recipe: &Recipe, seed: u64, dir: &std::path::Path) -> Result<GenerateSummary> {
    let mut summary = GenerateSummary::default();
    for split in [SOURCE_TRAIN, TARGET_TRAIN, TARGET_TEST] {
        let (images, failures) = recipe.render_split(split, seed)?;
        summary.images += images.len();
        summary.objects += images.iter().map(|i| i.detections.len()).sum::<usize>();
        summary.placement_failures += failures;
        write_dataset(&images, dir, split, &recipe.class_names())?;
    }
    if summary.placement_failures > 0 {
        log::warn!("{} objects could not be placed", summary.placement_failures);
    }
    Ok(summary)
}
