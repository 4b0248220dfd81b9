//! The training loop: supervised detection loss on the labeled domain plus
//! the alignment terms of the configured method, one optimizer step per
//! paired source/target batch.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::data::LabeledImage;
use crate::detector::{decode, split_heads, supervised_loss_tape, DetectorVars, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::global_align::img_loss_tape;
use crate::harness::config::TrainConfig;
use crate::harness::eval::evaluate;
use crate::harness::model::Model;
use crate::harness::optim::{clip_global_norm, cosine_lr, Optimizer};
use crate::instance_vsa::InstanceDiagnostics;
use crate::pc::pc_loss_tape;

/// Tape scopes used to attribute nodes and backward work to loss terms.
pub const SCOPE_DETECTOR: &str = "detector";
pub const SCOPE_IMG: &str = "img";
pub const SCOPE_INST: &str = "inst";
pub const SCOPE_PC: &str = "pc";

/// One logged training step. `total = yolo + λ_img·img + λ_inst·inst + λ_pc·pc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub yolo: f64,
    pub img: f64,
    pub inst: f64,
    pub pc: f64,
    /// Cumulative count of batches whose alignment branch had nothing to align.
    pub skipped_instance_batches: usize,
    pub lr: f64,
    /// Backward evaluations per scope in this step.
    pub backward_img: usize,
    pub backward_inst: usize,
    pub backward_pc: usize,
    pub instances: [usize; 2],
    pub clusters: [usize; 2],
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,L_total,L_yolo,L_img,L_inst,L_pc,skipped_instance_batches";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.step, self.total, self.yolo, self.img, self.inst, self.pc, self.skipped_instance_batches
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<StepLog>,
    /// Best validation mAP and the parameters that reached it.
    pub best: Option<(f64, usize, ParamStore)>,
}

fn require_labeled(images: &[LabeledImage], what: &str) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if let Some(i) = images.iter().position(|im| im.unlabeled) {
        return Err(Error::Data(format!("{what} split must be labeled (image {i} has no labels)")));
    }
    Ok(())
}

/// Keeps the `cap` most confident detections across a batch, per image.
fn batch_instances(tape: &Tape, vars: &DetectorVars, model: &Model, n: usize) -> Vec<Vec<Detection>> {
    let cfg = &model.config;
    let raws = split_heads(tape, vars, &model.detector_config().strides, n);
    let mut all: Vec<(usize, Detection)> = raws
        .iter()
        .enumerate()
        .flat_map(|(i, r)| decode(r, cfg.conf_threshold as f32, cfg.nms_iou as f32).into_iter().map(move |d| (i, d)))
        .collect();
    all.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    all.truncate(cfg.max_instances);
    let mut per_image = vec![Vec::new(); n];
    for (i, d) in all {
        per_image[i].push(d);
    }
    per_image
}

struct StepTerms {
    total: Var,
    log: StepLog,
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item() as f64)
}

/// Builds every loss term for one batch on `tape`.
fn build_step(
    tape: &mut Tape,
    model: &Model,
    labeled: &[&LabeledImage],
    unlabeled: &[&LabeledImage],
    step: usize,
) -> Result<(StepTerms, InstanceDiagnostics, bool)> {
    let cfg = &model.config;
    let comp = cfg.method.composition();
    let store = &model.store;
    let weights = LossWeights {
        boxes: cfg.box_weight,
        objectness: cfg.objectness_weight,
        classes: cfg.class_weight,
    };

    tape.set_scope(SCOPE_DETECTOR);
    let xs = model.detector.batch_tensor(&labeled.iter().map(|l| &l.image).collect::<Vec<_>>())?;
    let xs = tape.constant(xs);
    let vs = model.detector.forward_tape(tape, store, xs);
    let gts: Vec<&[Detection]> = labeled.iter().map(|l| l.detections.as_slice()).collect();
    let (yolo, _) = supervised_loss_tape(tape, &vs.heads, &gts, model.detector_config(), &weights);

    let mut img = None;
    let mut inst = None;
    let mut pc = None;
    let mut diag = InstanceDiagnostics::default();
    let mut skipped = false;
    if comp.uses_target_images() {
        let xt = model.detector.batch_tensor(&unlabeled.iter().map(|l| &l.image).collect::<Vec<_>>())?;
        let xt = tape.constant(xt);
        let vt = model.detector.forward_tape(tape, store, xt);

        if let Some(disc) = &model.image_disc {
            tape.set_scope(SCOPE_IMG);
            img = Some(img_loss_tape(tape, store, disc, vs.global, vt.global, cfg.grl_lambda as f32)?);
        }
        tape.set_scope(SCOPE_INST);
        if let Some(al) = &model.instance {
            let ds = batch_instances(tape, &vs, model, labeled.len());
            let dt = batch_instances(tape, &vt, model, unlabeled.len());
            let (l, d) = al.loss_tape(tape, store, model.detector_config(), &vs.instance, &vt.instance, &ds, &dt)?;
            inst = l;
            diag = d;
            skipped = l.is_none();
        }
        if let Some(fa) = &model.feature {
            let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64);
            let (l, _) = fa.loss_tape(tape, store, &vs.instance, &vt.instance, seed)?;
            inst = l;
            skipped = l.is_none();
        }
        if comp.pc {
            tape.set_scope(SCOPE_PC);
            pc = Some(pc_loss_tape(tape, &vs.instance, &vt.instance, cfg.pc_normalize)?);
        }
    }
    tape.set_scope(SCOPE_DETECTOR);

    let mut terms = vec![(yolo, 1.0f32)];
    for (t, w) in [(img, cfg.lambda_img), (inst, cfg.lambda_inst), (pc, cfg.lambda_pc)] {
        if let Some(t) = t {
            terms.push((t, w as f32));
        }
    }
    let total = tape.weighted_sum(&terms);
    let (y, i, n, p) = (value(tape, Some(yolo)), value(tape, img), value(tape, inst), value(tape, pc));
    let log = StepLog {
        step,
        total: y + cfg.lambda_img * i + cfg.lambda_inst * n + cfg.lambda_pc * p,
        yolo: y,
        img: i,
        inst: n,
        pc: p,
        skipped_instance_batches: 0,
        lr: 0.0,
        backward_img: 0,
        backward_inst: 0,
        backward_pc: 0,
        instances: diag.instances,
        clusters: diag.clusters,
    };
    Ok((StepTerms { total, log }, diag, skipped))
}

/// Trains `cfg.method` on a labeled source split and a (possibly
/// unlabeled) target split. The oracle method supervises on the target
/// split instead and ignores the source split. Target images are drawn
/// cyclically by the labeled batch's indices.
pub fn train(
    cfg: &TrainConfig,
    classes: &[String],
    source: &[LabeledImage],
    target: &[LabeledImage],
    validation: Option<&[LabeledImage]>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let comp = cfg.method.composition();
    let labeled = if comp.supervise_target {
        require_labeled(target, "target")?;
        target
    } else {
        require_labeled(source, "source")?;
        source
    };
    if comp.uses_target_images() && target.is_empty() {
        return Err(Error::Data("target split is empty".into()));
    }
    let mut model = Model::new(cfg.clone(), classes.to_vec())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = labeled.len().div_ceil(cfg.batch_size);
    let mut total_steps = steps_per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let mut logs = Vec::with_capacity(total_steps);
    let mut skipped_total = 0;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break 'epochs;
            }
            let lab: Vec<&LabeledImage> = chunk.iter().map(|&i| &labeled[i]).collect();
            let unl: Vec<&LabeledImage> = if comp.uses_target_images() {
                chunk.iter().map(|&i| &target[i % target.len()]).collect()
            } else {
                Vec::new()
            };

            let mut tape = Tape::new();
            let (terms, _diag, skipped) = build_step(&mut tape, &model, &lab, &unl, step)?;
            let mut log = terms.log;
            if !log.total.is_finite() || !tape.value(terms.total).is_finite() {
                log::error!(
                    "non-finite loss at step {step}, epoch {epoch}, batch {batch_idx}: images {chunk:?}, components {log:?}"
                );
                return Err(Error::NonFinite {
                    step,
                    batch: batch_idx,
                    detail: format!(
                        "epoch {epoch}, labeled images {chunk:?}: yolo={} img={} inst={} pc={}",
                        log.yolo, log.img, log.inst, log.pc
                    ),
                });
            }
            let grads = tape.backward(terms.total);
            let mut owned: HashMap<_, _> = grads.params().into_iter().map(|(id, g)| (id, g.clone())).collect();
            clip_global_norm(&mut owned, cfg.grad_clip);
            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps);
            opt.step(&mut model.store, &owned, lr);

            if skipped {
                skipped_total += 1;
            }
            log.skipped_instance_batches = skipped_total;
            log.lr = lr;
            log.backward_img = grads.stats.count(SCOPE_IMG);
            log.backward_inst = grads.stats.count(SCOPE_INST);
            log.backward_pc = grads.stats.count(SCOPE_PC);
            on_step(&log);
            logs.push(log);
            step += 1;
        }
        if let Some(val) = validation {
            if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
                let report = evaluate(&model, val, cfg.conf_threshold, cfg.nms_iou, 0.5)?;
                log::info!("epoch {} validation mAP@0.5 {:.4}", epoch + 1, report.map);
                if best.as_ref().map_or(true, |b| report.map > b.0) {
                    best = Some((report.map, epoch + 1, model.store.clone()));
                }
            }
        }
    }
    Ok(TrainOutcome { model, logs, best })
}
