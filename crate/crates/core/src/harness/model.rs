//! Trainable bundle (detector plus the alignment heads its method needs)
//! and its JSON checkpoint form.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::detector::{decode, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::feature_vsa::FeatureAligner;
use crate::geometry::DetectionSet;
use crate::global_align::Discriminator;
use crate::harness::config::TrainConfig;
use crate::instance_vsa::{InstanceAligner, InstanceConfig};
use crate::raster::GrayImage;

const IMAGE_DISC_HIDDEN: usize = 32;
const FEATURE_DISC_HIDDEN: usize = 8;
const INSTANCE_DISC_HIDDEN: usize = 64;
const PREDICT_BATCH: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub classes: Vec<String>,
    pub config: TrainConfig,
    pub detector: Detector,
    pub image_disc: Option<Discriminator>,
    pub instance: Option<InstanceAligner>,
    pub feature: Option<FeatureAligner>,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: TrainConfig, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let det_cfg = DetectorConfig::with_classes(classes.len());
        let mut store = ParamStore::new();
        let detector = Detector::new(det_cfg.clone(), &mut store, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a11a);
        let comp = config.method.composition();
        let image_disc = comp.image_level.then(|| {
            Discriminator::new(&mut store, &mut rng, "img.disc", det_cfg.backbone_channels, IMAGE_DISC_HIDDEN)
        });
        let instance = match comp.instance {
            Some((mode, sff)) => Some(InstanceAligner::new(
                &mut store,
                &mut rng,
                &det_cfg,
                InstanceConfig {
                    mode,
                    sff,
                    pool: config.pool_size,
                    keep_fraction: config.keep_fraction,
                    merge_threshold: config.merge_threshold,
                    margin: config.margin,
                    use_representatives: config.contrastive_representatives,
                    lambda: config.grl_lambda as f32,
                    min_instances: 2,
                    attention_kernel: config.attention_kernel,
                    disc_hidden: INSTANCE_DISC_HIDDEN,
                },
            )?),
            None => None,
        };
        let feature = match config.feature_grouping(classes.len()) {
            Some(g) => Some(FeatureAligner::new(
                &mut store,
                &mut rng,
                g,
                config.grl_lambda as f32,
                config.attention_kernel,
                FEATURE_DISC_HIDDEN,
            )?),
            None => None,
        };
        Ok(Self {
            classes,
            config,
            detector,
            image_disc,
            instance,
            feature,
            store,
        })
    }

    pub fn detector_config(&self) -> &DetectorConfig {
        &self.detector.config
    }

    /// Decoded, NMS-filtered detections for every image.
    pub fn predict(&self, images: &[&GrayImage], conf_threshold: f32, nms_iou: f32) -> Result<Vec<DetectionSet>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_BATCH) {
            for raw in self.detector.predict_batch(&self.store, chunk)? {
                out.push(decode(&raw, conf_threshold, nms_iou));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        model.detector.config.validate()?;
        Ok(model)
    }
}
