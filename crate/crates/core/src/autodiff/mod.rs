//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every training step. Each op appends a node
//! holding its output value and enough context to run its backward rule;
//! nodes are appended after their inputs, so the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
pub mod kernels;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

/// A fused operation whose forward value is computed by the caller and whose
/// backward rule is supplied as a trait object.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` where `need[i]` is false.
    fn backward(&self, inputs: &[&Tensor], out_grad: &[f32], need: &[bool]) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    L2Normalize { input: Var, norms: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Full-precision value for scalar reductions.
    scalar: Option<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const BN_EPSILON: f32 = 1e-5;
pub const L2_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var], scalar: Option<f64>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op, scalar });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} is not on this tape", v.0)))
        }
    }

    fn finite(value: &Tensor, op: &'static str) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            scalar: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, in full precision when the producing op kept it.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (o, wc, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(Error::shape(OP, "channels", format!("input has {c}, weight expects {wc}")));
        }
        if kh != kw {
            return Err(Error::shape(OP, "kernel", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                OP,
                "spatial",
                format!("kernel {kh} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(OP, "bias", format!("expected [{o}], got {:?}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        Self::finite(&value, OP)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, &deps, None))
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// In train mode the running statistics are updated in place by an
    /// exponential moving average with the given momentum (unbiased variance).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        train: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if n == 0 {
            return Err(Error::shape(OP, "batch", "empty batch"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(OP, "channels", format!("{name} has shape {:?}, input has {c} channels", self.value(v).shape())));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(OP, "channels", "running statistics length"));
        }
        let hw = h * w;
        let (mean, inv_std) = if train {
            let (mean, var) = kernels::channel_moments(self.value(input).data(), n, c, hw);
            let count = (n * hw) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                let m = momentum as f64;
                running_mean[ch] = ((1.0 - m) * running_mean[ch] as f64 + m * mean[ch]) as f32;
                running_var[ch] = ((1.0 - m) * running_var[ch] as f64 + m * var[ch] * unbias) as f32;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
            (mean, inv_std)
        } else {
            (
                running_mean.iter().map(|&m| m as f64).collect(),
                running_var.iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect(),
            )
        };
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let scale = g[ch] as f64 * inv_std[ch];
                let shift = b[ch] as f64 - mean[ch] * scale;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v as f64 * scale + shift) as f32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Self::finite(&value, OP)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[input, gamma, beta],
            None,
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        let x = self.value(input);
        let data = match act {
            Activation::Silu => x.data().iter().map(|&v| (v as f64 * kernels::sigmoid(v as f64)) as f32).collect(),
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Act(input, act), &[input], None))
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Silu)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                "shape",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Self::finite(&value, "add")?;
        Ok(self.push(value, Op::Add(a, b), &[a, b], None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Self::finite(&value, "mul")?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b], None))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Self::finite(&value, "scale")?;
        Ok(self.push(value, Op::Scale(a, factor), &[a], None))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar(s as f32);
        Self::finite(&value, "sum")?;
        Ok(self.push(value, Op::Sum(a), &[a], Some(s)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4(OP)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(OP, "spatial", format!("{:?} vs {:?}", self.value(p).shape(), self.value(first).shape())));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts, None))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(OP, "channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { input, start }, &[input], None))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample2x")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2x(input), &[input], None))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let out = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input], None))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, k) = self.value(input).dims2(OP)?;
        let (m, wk) = self.value(weight).dims2(OP)?;
        if wk != k {
            return Err(Error::shape(OP, "inner", format!("input has {k} features, weight expects {wk}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(Error::shape(OP, "bias", format!("expected [{m}], got {:?}", self.value(b).shape())));
            }
        }
        let y = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            k,
            m,
        );
        let value = Tensor::new(vec![n, m], y)?;
        Self::finite(&value, OP)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &deps, None))
    }

    /// Row-wise `x / (‖x‖ + 1e-12)`.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (_, k) = self.value(input).dims2("l2_normalize")?;
        let x = self.value(input).data();
        let mut norms = Vec::with_capacity(x.len() / k);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(k) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let d = norm + L2_FLOOR;
            out.extend(row.iter().map(|&v| (v as f64 / d) as f32));
            norms.push(norm);
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { input, norms }, &[input], None))
    }

    /// Records a fused op. `output` must already hold the forward value.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, scalar: Option<f64>, op: Box<dyn CustomOp>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !output.all_finite() || scalar.is_some_and(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
            scalar,
        ))
    }

    /// Populates gradients of `loss` with respect to every reachable node that
    /// requires grad. Gradients from multiple uses accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", "loss", format!("expected a scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &gy);
            grads[idx] = Some(gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].value.requires_grad() {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn node_backward(&self, idx: usize, gy: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gy,
                    geom,
                    (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))),
                );
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.weight.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let hw = h * w;
                let xd = x.data();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            let xhat = (xd[i] as f64 - mean[ch]) * inv_std[ch];
                            dgamma[ch] += gy[i] as f64 * xhat;
                            dbeta[ch] += gy[i] as f64;
                        }
                    }
                }
                if self.rg(*input) {
                    let m = (n * hw) as f64;
                    let mut dx = vec![0.0f32; xd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = g[ch] as f64 * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    let xhat = (xd[i] as f64 - mean[ch]) * inv_std[ch];
                                    (k * (gy[i] as f64 - dbeta[ch] / m - xhat * dgamma[ch] / m)) as f32
                                } else {
                                    (k * gy[i] as f64) as f32
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, dgamma.iter().map(|&v| v as f32).collect()));
                }
                if self.rg(*beta) {
                    out.push((*beta, dbeta.iter().map(|&v| v as f32).collect()));
                }
            }
            Op::Act(input, act) => {
                let x = self.value(*input).data();
                let dx = match act {
                    Activation::Silu => x
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| {
                            let s = kernels::sigmoid(v as f64);
                            (g as f64 * s * (1.0 + v as f64 * (1.0 - s))) as f32
                        })
                        .collect(),
                    Activation::Relu => x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
                };
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect()));
                out.push((*b, gy.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, f) => out.push((*a, gy.iter().map(|g| g * f).collect())),
            Op::Sum(a) => out.push((*a, vec![gy[0]; self.value(*a).numel()])),
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let (n, total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            g.extend_from_slice(&gy[(b * total + offset) * hw..(b * total + offset + pc) * hw]);
                        }
                        out.push((p, g));
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { input, start } => {
                let x = self.value(*input).shape();
                let (n, c, hw) = (x[0], x[1], x[2] * x[3]);
                let len = node.value.shape()[1];
                let mut g = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    g[(b * c + start) * hw..(b * c + start + len) * hw].copy_from_slice(&gy[b * len * hw..(b + 1) * len * hw]);
                }
                out.push((*input, g));
            }
            Op::Upsample2x(input) => {
                let x = self.value(*input).shape();
                let (h, w) = (x[2], x[3]);
                let ow = 2 * w;
                let mut g = vec![0.0f32; self.value(*input).numel()];
                for (p, dst) in g.chunks_mut(h * w).enumerate() {
                    let src = &gy[p * 4 * h * w..][..4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                out.push((*input, g));
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input).shape();
                let hw = x[2] * x[3];
                let inv = 1.0 / hw as f32;
                let g = gy.iter().flat_map(|&v| std::iter::repeat(v * inv).take(hw)).collect();
                out.push((*input, g));
            }
            Op::Linear { input, weight, bias } => {
                let (n, k) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let m = self.value(*weight).shape()[0];
                let (dx, dw, db) = kernels::linear_backward(self.value(*input).data(), self.value(*weight).data(), gy, n, k, m);
                if self.rg(*input) {
                    out.push((*input, dx));
                }
                if self.rg(*weight) {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let x = self.value(*input).data();
                let k = self.value(*input).shape()[1];
                let mut g = vec![0.0f32; x.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let xr = &x[r * k..(r + 1) * k];
                    let gr = &gy[r * k..(r + 1) * k];
                    let d = norm + L2_FLOOR;
                    let dot: f64 = xr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let coeff = if norm > 0.0 { dot / (d * d * norm) } else { 0.0 };
                    for j in 0..k {
                        g[r * k + j] = (gr[j] as f64 / d - xr[j] as f64 * coeff) as f32;
                    }
                }
                out.push((*input, g));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let need: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                for (v, g) in inputs.iter().zip(op.backward(&values, gy, &need)) {
                    if let Some(g) = g {
                        out.push((*v, g));
                    }
                }
            }
        }
        out
    }
}
