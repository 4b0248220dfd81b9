//! Instance-clustering alignment.
//!
//! Detections are pooled out of the instance feature map of their assigned
//! scale, optionally filtered by channel attention, flattened into
//! embeddings, clustered per domain, and the per-cluster means are aligned
//! either through a domain discriminator or by nearest-neighbour
//! contrastive pairing. Embedding length differs per scale, so every scale
//! is handled separately and the per-scale losses are summed.

pub mod attention;
pub mod contrastive;
pub mod extract;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{channel_attention, keep_count, sff_filter, sff_tape, ChannelAttention, ChannelRanking};
pub use contrastive::{contrastive_loss, contrastive_tape, nearest_neighbor};
pub use extract::{extract_instances, roi_pool_tape, Extraction, InstanceCrop};

use crate::autograd::{ParamStore, Tape, Var};
use crate::cluster::agglomerate;
use crate::cluster::StopRule;
use crate::detector::{assign_scale, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::global_align::{adv_loss_tape, DomainLabel, VectorDiscriminator};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEmbedding {
    pub z: Vec<f32>,
    pub domain: DomainLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMode {
    Adversarial,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub mode: AlignMode,
    pub sff: bool,
    pub pool: usize,
    pub keep_fraction: f64,
    pub merge_threshold: f64,
    pub margin: f64,
    /// Align cluster means rather than raw embeddings (contrastive mode only).
    pub use_representatives: bool,
    pub lambda: f32,
    /// Fewer instances than this in either domain skips a scale.
    pub min_instances: usize,
    pub attention_kernel: usize,
    pub disc_hidden: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::Adversarial,
            sff: false,
            pool: 3,
            keep_fraction: 0.5,
            merge_threshold: 0.1,
            margin: 1.0,
            use_representatives: true,
            lambda: 1.0,
            min_instances: 2,
            attention_kernel: 3,
            disc_hidden: 64,
        }
    }
}

/// Per-batch counts reported to the training log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDiagnostics {
    /// Pooled instances, (source, target).
    pub instances: [usize; 2],
    /// Clusters formed, (source, target).
    pub clusters: [usize; 2],
    pub dropped: usize,
    pub skipped_scales: usize,
    /// No scale contributed a loss term.
    pub skipped: bool,
}

/// Detections at or above `conf`, highest confidence first, at most `cap`.
pub fn select_instances(dets: &[Detection], conf: f32, cap: usize) -> Vec<Detection> {
    let mut out: Vec<Detection> = dets.iter().filter(|d| d.confidence >= conf).copied().collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(cap);
    out
}

/// Discriminator loss on representatives: mean source BCE (d = 0) plus mean
/// target BCE (d = 1), behind gradient reversal. An absent domain adds
/// nothing and counts as skipped.
pub fn instance_adv_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    disc: &VectorDiscriminator,
    src: Option<Var>,
    tgt: Option<Var>,
    lambda: f32,
) -> (Option<Var>, usize) {
    let mut terms = Vec::with_capacity(2);
    let mut skipped = 0;
    for (rows, d) in [(src, DomainLabel::Source), (tgt, DomainLabel::Target)] {
        match rows {
            Some(x) if tape.shape(x)[0] > 0 => {
                let r = tape.grl(x, lambda);
                let logits = disc.forward_tape(tape, store, r);
                terms.push((adv_loss_tape(tape, logits, d), 1.0));
            }
            _ => skipped += 1,
        }
    }
    let loss = (!terms.is_empty()).then(|| tape.weighted_sum(&terms));
    (loss, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvLossValue {
    pub value: f64,
    pub skipped_domains: usize,
}

/// Value form of [`instance_adv_loss_tape`].
pub fn instance_adv_loss(
    store: &ParamStore,
    disc: &VectorDiscriminator,
    src_reps: &[Vec<f32>],
    tgt_reps: &[Vec<f32>],
    lambda: f32,
) -> Result<AdvLossValue> {
    let mut tape = Tape::new();
    let mut rows = |reps: &[Vec<f32>]| -> Result<Option<Var>> {
        if reps.is_empty() {
            return Ok(None);
        }
        if reps.iter().any(|r| r.len() != disc.input) {
            return Err(Error::Shape(format!("representatives must have length {}", disc.input)));
        }
        let data = reps.iter().flatten().copied().collect();
        Ok(Some(tape.constant(Tensor::from_vec(&[reps.len(), disc.input], data))))
    };
    let (s, t) = (rows(src_reps)?, rows(tgt_reps)?);
    let (loss, skipped_domains) = instance_adv_loss_tape(&mut tape, store, disc, s, t, lambda);
    Ok(AdvLossValue {
        value: loss.map_or(0.0, |l| tape.value(l).item() as f64),
        skipped_domains,
    })
}

/// Learned state of the instance branch: per-scale attention kernels (SFF)
/// and per-scale discriminators (adversarial mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceAligner {
    pub cfg: InstanceConfig,
    attention: Vec<ChannelAttention>,
    discs: Vec<VectorDiscriminator>,
}

impl InstanceAligner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, det: &DetectorConfig, cfg: InstanceConfig) -> Result<Self> {
        if cfg.pool == 0 {
            return Err(Error::Config("instance pool size must be at least 1".into()));
        }
        if !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep fraction {} outside (0, 1]", cfg.keep_fraction)));
        }
        let mut attention = Vec::new();
        let mut discs = Vec::new();
        for (s, &c) in det.neck_channels.iter().enumerate() {
            let kept = if cfg.sff {
                attention.push(ChannelAttention::new(
                    store,
                    rng,
                    &format!("inst.attention{s}"),
                    cfg.attention_kernel,
                )?);
                keep_count(c, cfg.keep_fraction)
            } else {
                c
            };
            if cfg.mode == AlignMode::Adversarial {
                let m = kept * cfg.pool * cfg.pool;
                discs.push(VectorDiscriminator::new(store, rng, &format!("inst.disc{s}"), m, cfg.disc_hidden));
            }
        }
        Ok(Self { cfg, attention, discs })
    }

    /// Embedding nodes (length `m`) for every instance of one domain at one scale.
    fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        dets: &[Vec<Detection>],
        det_cfg: &DetectorConfig,
        scale: usize,
        dropped: &mut usize,
    ) -> Vec<Var> {
        let mut out = Vec::new();
        for (sample, image_dets) in dets.iter().enumerate() {
            for det in image_dets.iter().filter(|d| assign_scale(d, det_cfg) == scale) {
                let Some(mut crop) = roi_pool_tape(tape, features, sample, &det.bbox, self.cfg.pool) else {
                    *dropped += 1;
                    continue;
                };
                if self.cfg.sff {
                    let w = self.attention[scale].forward_tape(tape, store, crop);
                    crop = sff_tape(tape, crop, w, self.cfg.keep_fraction);
                }
                let n = tape.value(crop).numel();
                out.push(tape.reshape(crop, &[n]));
            }
        }
        out
    }

    /// Cluster means per domain, or `None` on degenerate (all-zero) embeddings.
    fn group(&self, tape: &mut Tape, embeddings: &[Var]) -> Option<Vec<Var>> {
        let values: Vec<Vec<f32>> = embeddings.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        let labels = match agglomerate(&values, StopRule::Threshold(self.cfg.merge_threshold)) {
            Ok(l) => l,
            Err(Error::DegenerateEmbedding) => return None,
            Err(e) => panic!("clustering of well-formed embeddings failed: {e}"),
        };
        let groups = labels.iter().max().map_or(0, |m| m + 1);
        Some(
            (0..groups)
                .map(|g| {
                    let members: Vec<Var> = labels
                        .iter()
                        .zip(embeddings)
                        .filter(|(&l, _)| l == g)
                        .map(|(_, &v)| v)
                        .collect();
                    tape.mean_of(&members)
                })
                .collect(),
        )
    }

    /// Instance loss over batched per-scale instance features
    /// (`N × C × H × W` nodes) and per-image detections of each domain.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        det_cfg: &DetectorConfig,
        src_features: &[Var; 3],
        tgt_features: &[Var; 3],
        src_dets: &[Vec<Detection>],
        tgt_dets: &[Vec<Detection>],
    ) -> Result<(Option<Var>, InstanceDiagnostics)> {
        let mut diag = InstanceDiagnostics::default();
        let mut terms: Vec<(Var, f32)> = Vec::new();
        for scale in 0..3 {
            let zs = self.embed(tape, store, src_features[scale], src_dets, det_cfg, scale, &mut diag.dropped);
            let zt = self.embed(tape, store, tgt_features[scale], tgt_dets, det_cfg, scale, &mut diag.dropped);
            diag.instances[0] += zs.len();
            diag.instances[1] += zt.len();
            if zs.len() < self.cfg.min_instances || zt.len() < self.cfg.min_instances {
                diag.skipped_scales += 1;
                continue;
            }
            let cluster = self.cfg.mode == AlignMode::Adversarial || self.cfg.use_representatives;
            let (rs, rt) = if cluster {
                match (self.group(tape, &zs), self.group(tape, &zt)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        diag.skipped_scales += 1;
                        continue;
                    }
                }
            } else {
                (zs, zt)
            };
            if cluster {
                diag.clusters[0] += rs.len();
                diag.clusters[1] += rt.len();
            }
            let term = match self.cfg.mode {
                AlignMode::Adversarial => {
                    let (s, t) = (tape.stack(&rs), tape.stack(&rt));
                    instance_adv_loss_tape(tape, store, &self.discs[scale], Some(s), Some(t), self.cfg.lambda)
                        .0
                        .expect("both domains present")
                }
                AlignMode::Contrastive => {
                    let ns: Vec<Var> = rs.iter().map(|&v| tape.l2_normalize(v)).collect();
                    let nt: Vec<Var> = rt.iter().map(|&v| tape.l2_normalize(v)).collect();
                    let (s, t) = (tape.stack(&ns), tape.stack(&nt));
                    contrastive_tape(tape, s, t, self.cfg.margin)?
                }
            };
            terms.push((term, 1.0));
        }
        diag.skipped = terms.is_empty();
        let loss = (!terms.is_empty()).then(|| tape.weighted_sum(&terms));
        Ok((loss, diag))
    }
}
