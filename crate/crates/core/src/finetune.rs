//! Backbone transfer and supervised fine-tuning of the detector.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{horizontal_flip, mosaic, random_affine, resize_bilinear, AffineLimits, ImageSample};
use crate::backbone::{BACKBONE_PREFIX, PROJECTION_PREFIX};
use crate::boxes::{Detection, Rect};
use crate::detector::{assign_targets, detection_loss, postprocess, Detector};
use crate::error::{CheckpointError, Error, Result};
use crate::eval::{map_range, match_pooled, precision_recall_summary};
use crate::io::checkpoint::Checkpoint;
use crate::io::metrics::{LossParts, MetricsRecord, RunLog};
use crate::optim::{backbone_lr_multiplier, step_decay, Sgd};
use crate::rng::{rng_from, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Scratch,
    /// Backbone from the pretraining checkpoint.
    Ssl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub backbone_lr_multiplier: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub image_size: usize,
    pub mosaic: bool,
    pub mosaic_prob: f64,
    pub affine: bool,
    pub affine_prob: f64,
    pub affine_limits: AffineLimits,
    pub flip_prob: f64,
    pub seed: u64,
    pub init: InitMode,
    /// Pretraining checkpoint read when `init = "ssl"`.
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub conf_thresh: f32,
    pub nms_iou: f64,
    pub log_wall_clock: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-3,
            backbone_lr_multiplier: 0.1,
            warmup_epochs: 3,
            momentum: 0.9,
            weight_decay: 5e-4,
            image_size: 128,
            mosaic: true,
            mosaic_prob: 0.5,
            affine: true,
            affine_prob: 0.5,
            affine_limits: AffineLimits::default(),
            flip_prob: 0.5,
            seed: 0,
            init: InitMode::Scratch,
            checkpoint: PathBuf::from("pretrain.ckpt"),
            train: PathBuf::from("data/train"),
            val: PathBuf::from("data/val"),
            conf_thresh: 0.001,
            nms_iou: 0.45,
            log_wall_clock: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("finetune.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be positive"));
        }
        if !(self.backbone_lr_multiplier > 0.0 && self.backbone_lr_multiplier <= 1.0) {
            return Err(Error::config("finetune.backbone_lr_multiplier", "must lie in (0, 1]"));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config("finetune.image_size", "must be a positive multiple of 32"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("finetune.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("finetune.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("finetune.weight_decay", "must be non-negative"));
        }
        for (k, p) in [
            ("finetune.mosaic_prob", self.mosaic_prob),
            ("finetune.affine_prob", self.affine_prob),
            ("finetune.flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(k, "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.conf_thresh) {
            return Err(Error::config("finetune.conf_thresh", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("finetune.nms_iou", "must lie in [0, 1]"));
        }
        self.affine_limits.validate()
    }
}

/// Redraws every parameter: backbone from fan-in uniform, neck and head
/// from Glorot, biases and batch-norm shift zero, scales one.
pub fn init_random<R: Rng + ?Sized>(det: &mut Detector, rng: &mut R) {
    det.store.reinit(BACKBONE_PREFIX, rng);
    det.store.reinit("neck.", rng);
    det.store.reinit("head.", rng);
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Checkpoint tensors outside the backbone.
    pub ignored: Vec<String>,
    /// Detector tensors the checkpoint cannot provide (neck and head).
    pub missing: Vec<String>,
}

/// Overwrites every backbone tensor (batch-norm statistics included) from
/// the checkpoint.
pub fn load_backbone_into_detector(ckpt: &Checkpoint, det: &mut Detector) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for (id, name, p) in det.store.iter() {
        if !name.starts_with(BACKBONE_PREFIX) {
            report.missing.push(name.to_string());
            continue;
        }
        let t = ckpt.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != p.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: p.tensor.shape().to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        updates.push((id, t.clone()));
        report.loaded.push(name.to_string());
    }
    for (id, t) in updates {
        det.store.get_mut(id).tensor = t;
    }
    report.ignored = ckpt.names().filter(|n| !n.starts_with(BACKBONE_PREFIX)).map(str::to_string).collect();
    if let Some(bad) = report.ignored.iter().find(|n| !n.starts_with(PROJECTION_PREFIX)) {
        log::warn!("checkpoint tensor `{bad}` is neither backbone nor projection; ignored");
    }
    Ok(report)
}

/// Learning rate of one parameter.
pub fn param_lr(name: &str, epoch: usize, cfg: &FinetuneConfig) -> f64 {
    let base = cfg.base_lr * step_decay(epoch, cfg.epochs);
    if Detector::is_backbone_param(name) {
        base * backbone_lr_multiplier(epoch, cfg.warmup_epochs, cfg.backbone_lr_multiplier)
    } else {
        base
    }
}

fn resized(img: &ImageSample, size: usize) -> Result<ImageSample> {
    if img.height() == size && img.width() == size {
        return Ok(img.clone());
    }
    ImageSample::new(resize_bilinear(&img.pixels, size, size)?, img.boxes.clone(), img.source_id.clone())
}

/// Training sample `index` of `epoch`: optional mosaic with three random
/// partners, optional affine, horizontal flip.
pub fn train_sample(images: &[ImageSample], index: usize, epoch: usize, cfg: &FinetuneConfig) -> Result<ImageSample> {
    let mut rng = rng_from(cfg.seed, &[streams::AUGMENT, epoch as u64, index as u64]);
    let size = cfg.image_size;
    let mut img = if cfg.mosaic && rng.gen_bool(cfg.mosaic_prob) {
        let others: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..images.len()));
        let parts = [&images[index], &images[others[0]], &images[others[1]], &images[others[2]]];
        mosaic(parts, &mut rng, size)?
    } else {
        resized(&images[index], size)?
    };
    if cfg.affine && rng.gen_bool(cfg.affine_prob) {
        img = random_affine(&img, &mut rng, &cfg.affine_limits);
    }
    Ok(horizontal_flip(&img, &mut rng, cfg.flip_prob))
}

pub fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[streams::SHUFFLE, epoch as u64]));
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Validation losses, detections and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub loss: LossParts,
    pub detections: Vec<Vec<Detection>>,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

const EVAL_BATCH: usize = 16;

/// Eval-mode pass over `images` (resized to `cfg.image_size`); losses are
/// image-weighted means over batches.
pub fn validate(det: &mut Detector, images: &[ImageSample], cfg: &FinetuneConfig) -> Result<Validation> {
    if images.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    let size = cfg.image_size;
    let bins = det.bins();
    let head_cfg = det.head_config().clone();
    let mut loss = LossParts::default();
    let mut detections = Vec::with_capacity(images.len());
    let mut gts: Vec<Vec<Rect>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let samples: Vec<ImageSample> = chunk.par_iter().map(|s| resized(s, size)).collect::<Result<_>>()?;
        let batch = Tensor::stack(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
        let assignments: Vec<_> = samples.iter().map(|s| assign_targets(&s.boxes, size, size, bins)).collect();
        let (mut s, head) = det.run(batch, false, false)?;
        let out = detection_loss(&mut s.tape, &head, &assignments, &head_cfg)?;
        let w = chunk.len() as f64 / images.len() as f64;
        loss.box_loss += w * out.parts.box_loss;
        loss.cls_loss += w * out.parts.cls_loss;
        loss.dfl_loss += w * out.parts.dfl_loss;
        detections.extend(postprocess(&s.tape, &head, bins, size, size, cfg.conf_thresh, cfg.nms_iou)?);
        gts.extend(assignments.into_iter().map(|a| a.gts));
    }
    let summary = map_range(&detections, &gts)?;
    let m = match_pooled(&detections, &gts, 0.5)?;
    let (precision, recall) = precision_recall_summary(&m)?;
    Ok(Validation {
        loss,
        detections,
        precision,
        recall,
        map50: summary.map50,
        map50_95: summary.map50_95,
    })
}

fn abort(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::TrainingAborted {
            epoch,
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One SGD step on a batch; returns the gain-weighted loss parts.
pub fn train_step(det: &mut Detector, opt: &mut Sgd, samples: &[ImageSample], epoch: usize, cfg: &FinetuneConfig) -> Result<LossParts> {
    let size = cfg.image_size;
    let bins = det.bins();
    let head_cfg = det.head_config().clone();
    let batch = Tensor::stack(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
    let assignments: Vec<_> = samples.iter().map(|s| assign_targets(&s.boxes, size, size, bins)).collect();
    let (parts, grads) = {
        let (mut s, head) = det.run(batch, true, true)?;
        let out = detection_loss(&mut s.tape, &head, &assignments, &head_cfg)?;
        s.tape.backward(out.total)?;
        let grads: Vec<_> = s.grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
        (out.parts, grads)
    };
    if !parts.total().is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("non-finite loss {}", parts.total())));
    }
    opt.step(&mut det.store, &grads, |name| param_lr(name, epoch, cfg))?;
    Ok(parts)
}

/// Trains `det` in place. Validation runs after every epoch when `val` is
/// nonempty; otherwise the validation fields stay empty.
pub fn finetune(det: &mut Detector, train: &[ImageSample], val: &[ImageSample], cfg: &FinetuneConfig) -> Result<RunLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    if val.is_empty() {
        log::warn!("validation split is empty; metrics will be absent");
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = RunLog::default();
    let start = Instant::now();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = LossParts::default();
        for batch in &batches {
            let samples: Vec<ImageSample> = batch.par_iter().map(|&i| train_sample(train, i, epoch, cfg)).collect::<Result<_>>()?;
            let parts = train_step(det, &mut opt, &samples, epoch, cfg).map_err(|e| match e {
                Error::InvalidArgument(msg) if msg.starts_with("non-finite") => Error::TrainingAborted { epoch: epoch + 1, step, msg },
                other => abort(epoch + 1, step, other),
            })?;
            step += 1;
            sum.box_loss += parts.box_loss;
            sum.cls_loss += parts.cls_loss;
            sum.dfl_loss += parts.dfl_loss;
            log::debug!("finetune epoch {} step {step} loss {:.6}", epoch + 1, parts.total());
        }
        let k = batches.len() as f64;
        let mut rec = MetricsRecord {
            epoch: epoch + 1,
            lr: param_lr("", epoch, cfg),
            train: LossParts {
                box_loss: sum.box_loss / k,
                cls_loss: sum.cls_loss / k,
                dfl_loss: sum.dfl_loss / k,
            },
            ..Default::default()
        };
        if !val.is_empty() {
            let v = validate(det, val, cfg)?;
            rec.val = Some(v.loss);
            rec.precision = Some(v.precision);
            rec.recall = Some(v.recall);
            rec.map50 = Some(v.map50);
            rec.map50_95 = Some(v.map50_95);
        }
        rec.seconds = if cfg.log_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
        log::info!(
            "finetune epoch {}/{} train {:.4} val {:.4} mAP50 {:.4} mAP50-95 {:.4}",
            rec.epoch,
            cfg.epochs,
            rec.train.total(),
            rec.val.map(|v| v.total()).unwrap_or(f64::NAN),
            rec.map50.unwrap_or(f64::NAN),
            rec.map50_95.unwrap_or(f64::NAN)
        );
        log.records.push(rec);
    }
    log.seconds = if cfg.log_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
    Ok(log)
}
