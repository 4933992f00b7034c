//! Contrastive pretraining: view pairs → embeddings → NT-Xent → SGD.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentPolicy, ImageSample, ViewPair};
use crate::autodiff::{CustomOp, Tape, Var};
use crate::backbone::{BackboneConfig, Encoder, ProjectionConfig};
use crate::error::{Error, Result};
use crate::io::metrics::ContrastiveRecord;
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{derive_path, rng_from, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Images per step; each contributes two views.
    pub batch_size: usize,
    pub temperature: f64,
    /// `0.05 · batch_size / 256` when absent.
    pub lr_max: Option<f64>,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Record elapsed seconds in the metrics log; zero otherwise.
    pub log_wall_clock: bool,
    pub augment: AugmentPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            temperature: 0.1,
            lr_max: None,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            dataset: PathBuf::from("data/unlabeled"),
            checkpoint: PathBuf::from("pretrain.ckpt"),
            log_wall_clock: true,
            augment: AugmentPolicy::default(),
        }
    }
}

impl PretrainConfig {
    pub fn lr_max(&self) -> f64 {
        self.lr_max.unwrap_or(0.05 * self.batch_size as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("pretrain.temperature", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("pretrain.batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("pretrain.epochs", "must be positive"));
        }
        if !(self.lr_min >= 0.0 && self.lr_max() >= self.lr_min) {
            return Err(Error::config("pretrain.lr_max", "need lr_max >= lr_min >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("pretrain.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("pretrain.weight_decay", "must be non-negative"));
        }
        self.augment.validate()
    }
}

struct NtXent {
    z: Vec<f64>,
    rows: usize,
    dim: usize,
    tau: f64,
}

impl NtXent {
    /// Loss and `G = ∂L/∂S` for `S = Z Zᵀ / τ`.
    fn evaluate(&self) -> (f64, Vec<f64>) {
        let (n, d) = (self.rows, self.dim);
        let z = &self.z;
        let mut g = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|k| (0..d).map(|j| z[i * d + j] * z[k * d + j]).sum::<f64>() / self.tau)
                .collect();
            let max = (0..n).filter(|&k| k != i).map(|k| s[k]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (s[k] - max).exp()).sum();
            let pos = i ^ 1;
            total += -(s[pos] - max) + denom.ln();
            for k in (0..n).filter(|&k| k != i) {
                let p = (s[k] - max).exp() / denom;
                g[i * n + k] = (p - (k == pos) as u8 as f64) / n as f64;
            }
        }
        (total / n as f64, g)
    }
}

impl CustomOp for NtXent {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn backward(&self, _inputs: &[&Tensor], out_grad: &[f32], need: &[bool]) -> Vec<Option<Vec<f32>>> {
        if !need[0] {
            return vec![None];
        }
        let (n, d) = (self.rows, self.dim);
        let (_, g) = self.evaluate();
        let scale = out_grad[0] as f64 / self.tau;
        let mut dz = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                let v: f64 = (0..n).map(|k| (g[i * n + k] + g[k * n + i]) * self.z[k * d + j]).sum();
                dz[i * d + j] = (scale * v) as f32;
            }
        }
        vec![Some(dz)]
    }
}

/// NT-Xent over unit rows where rows `2k` and `2k+1` are positives. Each
/// anchor's denominator runs over the other `2N − 1` rows.
pub fn nt_xent_loss(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let (rows, dim) = tape.value(z).dims2("nt_xent")?;
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::shape("nt_xent", "rows", format!("need an even row count of at least 4, got {rows}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let op = NtXent {
        z: tape.value(z).data().iter().map(|&v| v as f64).collect(),
        rows,
        dim,
        tau: temperature,
    };
    let (loss, _) = op.evaluate();
    tape.custom(&[z], Tensor::scalar(loss as f32), Some(loss), Box::new(op))
}

/// Training progress carried across steps.
#[derive(Clone, Debug, Default)]
pub struct PretrainState {
    pub step: usize,
    pub epoch: usize,
    pub running_loss: f64,
    pub optimizer: Sgd,
}

pub struct PretrainOutput {
    pub encoder: Encoder,
    pub records: Vec<ContrastiveRecord>,
    pub step_losses: Vec<f64>,
    pub state: PretrainState,
}

/// Batches of shuffled indices. A trailing single image is folded into the
/// previous batch since one pair has no negatives.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[streams::SHUFFLE, epoch as u64]));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Two views per image, interleaved: image `k` → rows `2k`, `2k+1`.
pub fn view_batch(images: &[ImageSample], batch: &[usize], seed: u64, epoch: usize, policy: &AugmentPolicy) -> Result<Tensor> {
    let pairs: Vec<ViewPair> = batch
        .par_iter()
        .map(|&i| make_view_pair(&images[i], derive_path(seed, &[streams::AUGMENT, epoch as u64, i as u64]), policy))
        .collect::<Result<_>>()?;
    let views: Vec<&Tensor> = pairs.iter().flat_map(|p| [&p.view_a.pixels, &p.view_b.pixels]).collect();
    Tensor::stack(&views)
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

pub fn pretrain(images: &[ImageSample], backbone: &BackboneConfig, projection: &ProjectionConfig, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::invalid(format!("pretraining needs at least 2 images, got {}", images.len())));
    }
    let mut encoder = Encoder::new(backbone, projection, cfg.seed)?;
    let steps_per_epoch = epoch_batches(images.len(), cfg.batch_size, cfg.seed, 0).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut state = PretrainState {
        optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch + 1;
        let mut sum = 0.0;
        let mut lr = 0.0;
        let batches = epoch_batches(images.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, batch) in batches.iter().enumerate() {
            lr = cosine_lr(state.step, total, cfg.lr_max(), cfg.lr_min);
            let x = view_batch(images, batch, cfg.seed, epoch, &cfg.augment)?;
            let (loss, grads) = {
                let out = encoder.encode(x, true, true).map_err(|e| abort(epoch + 1, state.step, e))?;
                let mut s = out.session;
                let l = nt_xent_loss(&mut s.tape, out.embeddings, cfg.temperature).map_err(|e| abort(epoch + 1, state.step, e))?;
                s.tape.backward(l)?;
                let grads: Vec<_> = s.grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
                (s.tape.scalar(l), grads)
            };
            if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::TrainingAborted {
                    epoch: epoch + 1,
                    step: state.step,
                    msg: format!("non-finite loss {loss} at batch {b}"),
                });
            }
            state.optimizer.step(&mut encoder.store, &grads, |_| lr)?;
            state.step += 1;
            sum += loss;
            step_losses.push(loss);
            log::debug!("pretrain epoch {} step {} loss {loss:.6} lr {lr:.6}", epoch + 1, state.step);
        }
        state.running_loss = sum / batches.len() as f64;
        let record = ContrastiveRecord {
            epoch: epoch + 1,
            lr,
            loss: state.running_loss,
            seconds: if cfg.log_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!("pretrain epoch {}/{} loss {:.6} lr {:.6}", record.epoch, cfg.epochs, record.loss, lr);
        records.push(record);
    }
    Ok(PretrainOutput {
        encoder,
        records,
        step_losses,
        state,
    })
}
