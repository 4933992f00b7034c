//! Named parameter storage, per-step binding onto a tape, and the small set
//! of layers the networks are assembled from.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var, BN_EPSILON};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// U(−b, b) with b = √(6 / fan_in); variance 2 / fan_in.
    FanIn,
    /// Glorot/Xavier: U(−b, b) with b = √(6 / (fan_in + fan_out)).
    Glorot,
    /// Constant fill (biases, batch-norm affine and statistics).
    Constant(f32),
}

impl InitScheme {
    /// Variance of a draw for a weight of the given shape.
    pub fn target_variance(self, shape: &[usize]) -> f64 {
        let (fan_in, fan_out) = fans(shape);
        match self {
            InitScheme::FanIn => 2.0 / fan_in as f64,
            InitScheme::Glorot => 2.0 / (fan_in + fan_out) as f64,
            InitScheme::Constant(_) => 0.0,
        }
    }

    fn fill<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Vec<f32> {
        let n: usize = shape.iter().product();
        match self {
            InitScheme::Constant(c) => vec![c; n],
            _ => {
                let bound = (3.0 * self.target_variance(shape)).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        }
    }
}

/// `(fan_in, fan_out)` of a conv `[O, C, k, k]` or linear `[M, K]` weight.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
        [m, k] => (*k, *m),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub init: InitScheme,
}

impl Param {
    pub fn trainable(&self) -> bool {
        !matches!(self.kind, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Ordered name → tensor map. Insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], kind: ParamKind, init: InitScheme, rng: &mut R) -> Result<ParamId> {
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let tensor = Tensor::new(shape.to_vec(), init.fill(shape, rng))?;
        let (idx, _) = self.params.insert_full(name, Param { tensor, kind, init });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid param id")
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params.iter().enumerate().map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable()).map(|p| p.tensor.numel()).sum()
    }

    /// Redraws every parameter whose name starts with `prefix` from its
    /// recorded scheme.
    pub fn reinit<R: Rng + ?Sized>(&mut self, prefix: &str, rng: &mut R) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                let data = p.init.fill(p.tensor.shape(), rng);
                p.tensor.data_mut().copy_from_slice(&data);
            }
        }
    }
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are copied onto the tape the first time a layer asks for them,
/// so only parameters actually used by the forward pass end up with grads.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    grad: bool,
}

impl<'s> Session<'s> {
    /// `train` selects batch statistics in batch norm; `grad` marks trainable
    /// parameters as requiring gradients.
    pub fn new(store: &'s mut ParamStore, train: bool, grad: bool) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            train,
            grad,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.tensor.clone().with_requires_grad(self.grad && p.trainable());
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let g = self.param(bn.gamma);
        let b = self.param(bn.beta);
        // Running statistics are never bound on the tape.
        let mut mean = self.store.get(bn.mean).tensor.data().to_vec();
        let mut var = self.store.get(bn.var).tensor.data().to_vec();
        let y = self.tape.batch_norm(x, g, b, &mut mean, &mut var, self.train, BN_MOMENTUM, BN_EPSILON)?;
        if self.train {
            self.store.get_mut(bn.mean).tensor.data_mut().copy_from_slice(&mean);
            self.store.get_mut(bn.var).tensor.data_mut().copy_from_slice(&var);
        }
        Ok(y)
    }

    /// Gradients of every bound trainable parameter, in store order.
    pub fn grads(&self) -> Vec<(ParamId, &[f32])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Silu,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Silu => Activation::Silu,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

/// Parameter factory that prefixes names and draws from one rng.
pub struct Init<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    /// Scheme for conv and linear weights.
    pub weights: InitScheme,
}

impl<'a, R: Rng + ?Sized> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, weights: InitScheme) -> Self {
        Self { store, rng, weights }
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, shape, ParamKind::Weight, self.weights, self.rng)
    }

    fn constant(&mut self, name: String, shape: &[usize], kind: ParamKind, value: f32) -> Result<ParamId> {
        self.store.add(name, shape, kind, InitScheme::Constant(value), self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(init: &mut Init<R>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(format!("{name}.weight"), &[c], ParamKind::BnGamma, 1.0)?,
            beta: init.constant(format!("{name}.bias"), &[c], ParamKind::BnBeta, 0.0)?,
            mean: init.constant(format!("{name}.running_mean"), &[c], ParamKind::RunningMean, 0.0)?,
            var: init.constant(format!("{name}.running_var"), &[c], ParamKind::RunningVar, 1.0)?,
        })
    }
}

/// Convolution without bias, batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
    pub padding: usize,
    pub act: Activation,
    pub out_channels: usize,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        init: &mut Init<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.weight(format!("{name}.conv.weight"), &[cout, cin, k, k])?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), cout)?,
            stride,
            padding: k / 2,
            act,
            out_channels: cout,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.conv2d(x, w, None, self.stride, self.padding)?;
        let y = s.batch_norm(y, &self.bn)?;
        s.tape.activation(y, self.act)
    }
}

/// Plain convolution with bias (prediction layers).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(format!("{name}.weight"), &[cout, cin, k, k])?,
            bias: init.constant(format!("{name}.bias"), &[cout], ParamKind::Bias, 0.0)?,
            padding: k / 2,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv2d(x, w, Some(b), 1, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(init: &mut Init<R>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(format!("{name}.weight"), &[cout, cin])?,
            bias: init.constant(format!("{name}.bias"), &[cout], ParamKind::Bias, 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_variance_matches_target() {
        // 256 fan-in: conv [64, 256, 1, 1]; five seeds each within 20%.
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let id = store.add("w".into(), &[64, 256, 1, 1], ParamKind::Weight, InitScheme::FanIn, &mut rng).unwrap();
            let d = store.get(id).tensor.data();
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
            let target = 2.0 / 256.0;
            assert!((var / target - 1.0).abs() < 0.2, "seed {seed}: {var} vs {target}");
        }
    }

    #[test]
    fn glorot_variance_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("w".into(), &[128, 256], ParamKind::Weight, InitScheme::Glorot, &mut rng).unwrap();
        let d = store.get(id).tensor.data();
        let var = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var / (2.0 / 384.0) - 1.0).abs() < 0.2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("a".into(), &[1], ParamKind::Bias, InitScheme::Constant(0.0), &mut rng).unwrap();
        assert!(store.add("a".into(), &[1], ParamKind::Bias, InitScheme::Constant(0.0), &mut rng).is_err());
    }

    #[test]
    fn session_binds_only_used_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &mut rng, InitScheme::FanIn);
        let used = Linear::new(&mut init, "used", 3, 2).unwrap();
        let _unused = Linear::new(&mut init, "unused", 3, 2).unwrap();
        let mut s = Session::new(&mut store, true, true);
        let x = s.input(Tensor::filled(&[1, 3], 1.0));
        let y = used.forward(&mut s, x).unwrap();
        let l = s.tape.sum(y).unwrap();
        s.tape.backward(l).unwrap();
        let names: Vec<String> = s.grads().iter().map(|(id, _)| s.store().name(*id).to_string()).collect();
        assert_eq!(names, ["used.weight", "used.bias"]);
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &mut rng, InitScheme::FanIn);
        let layer = ConvBnAct::new(&mut init, "c", 1, 2, 3, 1, Activation::Silu).unwrap();
        let before = store.get(layer.bn.mean).tensor.clone();
        {
            let mut s = Session::new(&mut store, false, false);
            let x = s.input(Tensor::filled(&[2, 1, 4, 4], 0.7));
            layer.forward(&mut s, x).unwrap();
        }
        assert_eq!(store.get(layer.bn.mean).tensor, before);
        {
            let mut s = Session::new(&mut store, true, true);
            let x = s.input(Tensor::filled(&[2, 1, 4, 4], 0.7));
            layer.forward(&mut s, x).unwrap();
        }
        assert_ne!(store.get(layer.bn.mean).tensor, before);
    }
}
