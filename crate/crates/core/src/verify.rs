//! Finite-difference gradient-check suite over every differentiable op, the
//! contrastive loss, the detection loss and a small end-to-end detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_at, CustomOp, Tape, Var, BN_EPSILON};
use crate::backbone::{BackboneConfig, BlockStyle};
use crate::boxes::GroundTruthBox;
use crate::detector::{assign_targets, detection_loss, Detector, HeadConfig, HeadOutput};
use crate::error::Result;
use crate::nn::Session;
use crate::pretrain::nt_xent_loss;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-3;

pub const OPS: [&str; 14] = [
    "conv2d",
    "batch_norm",
    "silu",
    "relu",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "slice_channels",
    "upsample2x",
    "global_avg_pool",
    "linear",
    "l2_normalize",
    "nt_xent",
];

pub const COMPOSITE: [&str; 2] = ["detection_loss", "detector"];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    /// Negates the backward pass of the named op.
    pub inject_sign_error: Option<String>,
    pub include_detector: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            inject_sign_error: None,
            include_detector: true,
        }
    }
}

/// Identity whose backward flips the sign.
struct SignFlip;

impl CustomOp for SignFlip {
    fn name(&self) -> &'static str {
        "sign_flip"
    }

    fn backward(&self, _inputs: &[&Tensor], out_grad: &[f32], need: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![need[0].then(|| out_grad.iter().map(|g| -g).collect())]
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape matches")
}

/// Fixed random weighting to a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Ctx {
    flip: bool,
}

impl Ctx {
    fn out(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        if !self.flip {
            return Ok(y);
        }
        let v = tape.value(y).clone();
        let s = v.is_scalar().then(|| tape.scalar(y));
        tape.custom(&[y], v, s, Box::new(SignFlip))
    }
}

/// Worst error over all inputs of one trial of `op`.
fn trial(op: &str, rng: &mut ChaCha8Rng, t: u64, ctx: &Ctx) -> Result<f64> {
    let ctx = &ctx;
    let e = match op {
        "conv2d" => {
            let x = rand_tensor(rng, &[2, 2, 5, 5]);
            let w = rand_tensor(rng, &[3, 2, 3, 3]);
            let b = rand_tensor(rng, &[3]);
            let (stride, pad) = if t % 2 == 0 { (1, 1) } else { (2, 0) };
            let inputs = [x, w, b];
            let mut worst = 0.0f64;
            for which in 0..3 {
                let f = |tape: &mut Tape, v: Var| {
                    let vars: Vec<Var> = (0..3).map(|k| if k == which { v } else { tape.leaf(inputs[k].clone()) }).collect();
                    let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, pad)?;
                    let y = ctx.out(tape, y)?;
                    project(tape, y, t)
                };
                worst = worst.max(grad_check(f, &inputs[which], STEP)?.max_rel_error);
            }
            worst
        }
        "batch_norm" => {
            let inputs = [rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])];
            let train = t % 2 == 0;
            let mut worst = 0.0f64;
            for which in 0..3 {
                let f = |tape: &mut Tape, v: Var| {
                    let (mut rm, mut rv) = (vec![0.1f32, -0.2], vec![0.8f32, 1.3]);
                    let vars: Vec<Var> = (0..3).map(|k| if k == which { v } else { tape.leaf(inputs[k].clone()) }).collect();
                    let y = tape.batch_norm(vars[0], vars[1], vars[2], &mut rm, &mut rv, train, 0.1, BN_EPSILON)?;
                    let y = ctx.out(tape, y)?;
                    project(tape, y, t)
                };
                worst = worst.max(grad_check(f, &inputs[which], STEP)?.max_rel_error);
            }
            worst
        }
        "silu" | "relu" | "add" | "mul" | "scale" | "slice_channels" | "upsample2x" | "global_avg_pool" => {
            let mut x = rand_tensor(rng, &[2, 4, 3, 3]);
            if op == "relu" {
                // Keep clear of the kink.
                for v in x.data_mut() {
                    if v.abs() < 0.01 {
                        *v += 0.05;
                    }
                }
            }
            let other = rand_tensor(rng, &[2, 4, 3, 3]);
            let f = |tape: &mut Tape, v: Var| {
                let y = match op {
                    "silu" => tape.silu(v)?,
                    "relu" => tape.relu(v)?,
                    "add" => {
                        let o = tape.leaf(other.clone());
                        tape.add(v, o)?
                    }
                    "mul" => {
                        let o = tape.leaf(other.clone());
                        tape.mul(v, o)?
                    }
                    "scale" => tape.scale(v, -1.7)?,
                    "slice_channels" => tape.slice_channels(v, 1, 2)?,
                    "upsample2x" => tape.upsample2x(v)?,
                    _ => tape.global_avg_pool(v)?,
                };
                let y = ctx.out(tape, y)?;
                project(tape, y, t)
            };
            grad_check(f, &x, STEP)?.max_rel_error
        }
        "concat_channels" => {
            let x = rand_tensor(rng, &[2, 3, 3, 3]);
            let other = rand_tensor(rng, &[2, 2, 3, 3]);
            let f = |tape: &mut Tape, v: Var| {
                let o = tape.leaf(other.clone());
                let y = tape.concat_channels(&[o, v, o])?;
                let y = ctx.out(tape, y)?;
                project(tape, y, t)
            };
            grad_check(f, &x, STEP)?.max_rel_error
        }
        "linear" => {
            let inputs = [rand_tensor(rng, &[3, 5]), rand_tensor(rng, &[4, 5]), rand_tensor(rng, &[4])];
            let mut worst = 0.0f64;
            for which in 0..3 {
                let f = |tape: &mut Tape, v: Var| {
                    let vars: Vec<Var> = (0..3).map(|k| if k == which { v } else { tape.leaf(inputs[k].clone()) }).collect();
                    let y = tape.linear(vars[0], vars[1], Some(vars[2]))?;
                    let y = ctx.out(tape, y)?;
                    project(tape, y, t)
                };
                worst = worst.max(grad_check(f, &inputs[which], STEP)?.max_rel_error);
            }
            worst
        }
        "l2_normalize" => {
            let x = rand_tensor(rng, &[3, 5]);
            let f = |tape: &mut Tape, v: Var| {
                let y = tape.l2_normalize(v)?;
                let y = ctx.out(tape, y)?;
                project(tape, y, t)
            };
            grad_check(f, &x, STEP)?.max_rel_error
        }
        "nt_xent" => {
            let rows = 2 * rng.gen_range(2..5);
            let tau = [0.1, 0.5, 1.0][t as usize % 3];
            let x = rand_tensor(rng, &[rows, 6]);
            let f = |tape: &mut Tape, v: Var| {
                let z = tape.l2_normalize(v)?;
                let l = nt_xent_loss(tape, z, tau)?;
                ctx.out(tape, l)
            };
            grad_check(f, &x, STEP)?.max_rel_error
        }
        "detection_loss" => detection_loss_trial(rng, ctx)?,
        "detector" => detector_trial(rng, t, ctx)?,
        other => return Err(crate::Error::invalid(format!("unknown gradcheck op `{other}`"))),
    };
    Ok(e)
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<GroundTruthBox> {
    (0..n)
        .map(|_| {
            let w = rng.gen_range(0.1f32..0.6);
            let h = rng.gen_range(0.1f32..0.6);
            GroundTruthBox::new(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h)
        })
        .collect()
}

/// Loss against each of the six head tensors in turn on a 64×64 batch of two.
fn detection_loss_trial(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<f64> {
    let cfg = HeadConfig {
        bins: 8,
        ..HeadConfig::default()
    };
    let size = 64;
    let grids: Vec<usize> = crate::backbone::FEATURE_STRIDES.iter().map(|s| size / s).collect();
    let mut tensors: Vec<Tensor> = grids.iter().map(|&g| rand_tensor(rng, &[2, 1, g, g])).collect();
    tensors.extend(grids.iter().map(|&g| rand_tensor(rng, &[2, 4 * cfg.bins, g, g])));
    let assignments: Vec<_> = (0..2)
        .map(|_| {
            let n = rng.gen_range(0..4);
            assign_targets(&random_boxes(rng, n), size, size, cfg.bins)
        })
        .collect();
    let mut worst = 0.0f64;
    for which in 0..6 {
        let f = |tape: &mut Tape, v: Var| {
            let vars: Vec<Var> = (0..6).map(|k| if k == which { v } else { tape.leaf(tensors[k].clone()) }).collect();
            let head = HeadOutput {
                cls: [vars[0], vars[1], vars[2]],
                boxes: [vars[3], vars[4], vars[5]],
            };
            let l = detection_loss(tape, &head, &assignments, &cfg)?.total;
            ctx.out(tape, l)
        };
        worst = worst.max(grad_check(f, &tensors[which], STEP)?.max_rel_error);
    }
    Ok(worst)
}

/// Tiny detector, train-mode batch norm, gradient against input pixels.
fn detector_trial(rng: &mut ChaCha8Rng, t: u64, ctx: &Ctx) -> Result<f64> {
    let bb = BackboneConfig {
        style: if t % 2 == 0 { BlockStyle::C2f } else { BlockStyle::C3 },
        stem_channels: 4,
        stage_channels: vec![4, 8, 8, 8],
        blocks_per_stage: vec![1, 1, 1, 1],
        ..BackboneConfig::default()
    };
    let head = HeadConfig {
        neck_channels: 8,
        bins: 4,
        ..HeadConfig::default()
    };
    let det = Detector::new(&bb, &head, rng.gen())?;
    let size = 64;
    let x = rand_tensor(rng, &[2, 3, size, size]);
    let assignments: Vec<_> = (0..2).map(|_| assign_targets(&random_boxes(rng, 2), size, size, head.bins)).collect();
    let indices: Vec<usize> = (0..24).map(|_| rng.gen_range(0..x.numel())).collect();
    let f = |tape: &mut Tape, v: Var| {
        let mut store = det.store.clone();
        let mut s = Session::new(&mut store, true, false);
        // Run the network on the caller's tape so `v` is the differentiated leaf.
        std::mem::swap(&mut s.tape, tape);
        let out = det.net.forward(&mut s, v);
        std::mem::swap(&mut s.tape, tape);
        let l = detection_loss(tape, &out?, &assignments, &head)?.total;
        ctx.out(tape, l)
    };
    Ok(grad_check_at(f, &x, STEP, &indices)?.max_rel_error)
}

/// Runs every check; an op passes when its worst error is below
/// [`TOLERANCE`].
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OpReport>> {
    let mut ops: Vec<&str> = OPS.to_vec();
    ops.push(COMPOSITE[0]);
    if opts.include_detector {
        ops.push(COMPOSITE[1]);
    }
    if let Some(name) = &opts.inject_sign_error {
        if !ops.contains(&name.as_str()) {
            return Err(crate::Error::invalid(format!("unknown gradcheck op `{name}`")));
        }
    }
    let mut out = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        let ctx = Ctx {
            flip: opts.inject_sign_error.as_deref() == Some(*op),
        };
        let trials = if *op == "detector" { opts.trials.min(4) } else { opts.trials };
        let mut worst = 0.0f64;
        for t in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_path(opts.seed, &[k as u64, t]));
            worst = worst.max(trial(op, &mut rng, t, &ctx)?);
        }
        out.push(OpReport {
            op: op.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
