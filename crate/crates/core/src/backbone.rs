//! CSP-style convolutional backbone and the contrastive encoder built on it.
//!
//! Topology: a stride-2 stem followed by four stages, each a stride-2
//! downsampling conv and a CSP block, so stage `i` (1-based) has output
//! stride `2^(i+1)`. Stages 2–4 are the stride-8/16/32 feature maps.
//!
//! Parameter namespace (a function of the config only):
//!
//! ```text
//! backbone.stem.{conv.weight, bn.*}
//! backbone.stage{i}.down.{conv.weight, bn.*}
//! backbone.stage{i}.csp.cv{1,2[,3]}.{conv.weight, bn.*}
//! backbone.stage{i}.csp.m{j}.cv{1,2}.{conv.weight, bn.*}
//! projection.fc{1,2}.{weight, bias}
//! ```
//! where `bn.*` is `bn.weight`, `bn.bias`, `bn.running_mean`, `bn.running_var`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Var};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, ConvBnAct, Init, InitScheme, Linear, ParamStore, Session};
use crate::rng::{rng_from, streams};
use crate::tensor::Tensor;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const PROJECTION_PREFIX: &str = "projection.";
/// Required divisibility of input height and width.
pub const MAX_STRIDE: usize = 32;
pub const FEATURE_STRIDES: [usize; 3] = [8, 16, 32];

/// Bottleneck arrangement inside each CSP block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    /// Split-concat block: every bottleneck output is kept and concatenated.
    #[default]
    C2f,
    /// Residual CSP block: bottleneck chain on one half, bypass on the other.
    C3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub style: BlockStyle,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub activation: ActivationKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            style: BlockStyle::C2f,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 2, 2, 1],
            width_multiple: 1.0,
            depth_multiple: 1.0,
            activation: ActivationKind::Silu,
        }
    }
}

fn make_divisible(x: f64, d: usize) -> usize {
    (((x / d as f64).ceil() as usize) * d).max(d)
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.blocks_per_stage.len() != 4 {
            return Err(Error::config("backbone.stage_channels", "exactly four stages are required (strides 4, 8, 16, 32)"));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("backbone.stage_channels", "channel counts must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("backbone.blocks_per_stage", "block counts must be positive"));
        }
        if !(self.width_multiple > 0.0 && self.width_multiple.is_finite()) {
            return Err(Error::config("backbone.width_multiple", "must be positive"));
        }
        if !(self.depth_multiple > 0.0 && self.depth_multiple.is_finite()) {
            return Err(Error::config("backbone.depth_multiple", "must be positive"));
        }
        Ok(())
    }

    /// Stem channels after the width multiple.
    pub fn stem_width(&self) -> usize {
        self.scaled_width(self.stem_channels)
    }

    fn scaled_width(&self, c: usize) -> usize {
        if self.width_multiple == 1.0 {
            c
        } else {
            make_divisible(c as f64 * self.width_multiple, 8)
        }
    }

    /// Stage output channels after the width multiple.
    pub fn widths(&self) -> Vec<usize> {
        self.stage_channels.iter().map(|&c| self.scaled_width(c)).collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.blocks_per_stage
            .iter()
            .map(|&n| ((n as f64 * self.depth_multiple).round() as usize).max(1))
            .collect()
    }

    /// Channel counts of the stride 8, 16, 32 feature maps.
    pub fn feature_channels(&self) -> [usize; 3] {
        let w = self.widths();
        [w[1], w[2], w[3]]
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
}

impl Bottleneck {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.cv1.forward(s, x)?;
        let y = self.cv2.forward(s, y)?;
        s.tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
enum CspBlock {
    C2f {
        cv1: ConvBnAct,
        cv2: ConvBnAct,
        m: Vec<Bottleneck>,
        hidden: usize,
    },
    C3 {
        cv1: ConvBnAct,
        cv2: ConvBnAct,
        cv3: ConvBnAct,
        m: Vec<Bottleneck>,
    },
}

impl CspBlock {
    fn new<R: Rng + ?Sized>(init: &mut Init<R>, name: &str, c: usize, n: usize, style: BlockStyle, act: Activation) -> Result<Self> {
        let h = c / 2;
        Ok(match style {
            BlockStyle::C2f => CspBlock::C2f {
                cv1: ConvBnAct::new(init, &format!("{name}.cv1"), c, 2 * h, 1, 1, act)?,
                m: (0..n)
                    .map(|j| {
                        Ok(Bottleneck {
                            cv1: ConvBnAct::new(init, &format!("{name}.m{j}.cv1"), h, h, 3, 1, act)?,
                            cv2: ConvBnAct::new(init, &format!("{name}.m{j}.cv2"), h, h, 3, 1, act)?,
                        })
                    })
                    .collect::<Result<_>>()?,
                cv2: ConvBnAct::new(init, &format!("{name}.cv2"), (2 + n) * h, c, 1, 1, act)?,
                hidden: h,
            },
            BlockStyle::C3 => CspBlock::C3 {
                cv1: ConvBnAct::new(init, &format!("{name}.cv1"), c, h, 1, 1, act)?,
                cv2: ConvBnAct::new(init, &format!("{name}.cv2"), c, h, 1, 1, act)?,
                m: (0..n)
                    .map(|j| {
                        Ok(Bottleneck {
                            cv1: ConvBnAct::new(init, &format!("{name}.m{j}.cv1"), h, h, 1, 1, act)?,
                            cv2: ConvBnAct::new(init, &format!("{name}.m{j}.cv2"), h, h, 3, 1, act)?,
                        })
                    })
                    .collect::<Result<_>>()?,
                cv3: ConvBnAct::new(init, &format!("{name}.cv3"), 2 * h, c, 1, 1, act)?,
            },
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            CspBlock::C2f { cv1, cv2, m, hidden } => {
                let y = cv1.forward(s, x)?;
                let a = s.tape.slice_channels(y, 0, *hidden)?;
                let mut b = s.tape.slice_channels(y, *hidden, *hidden)?;
                let mut parts = vec![a, b];
                for block in m {
                    b = block.forward(s, b)?;
                    parts.push(b);
                }
                let cat = s.tape.concat_channels(&parts)?;
                cv2.forward(s, cat)
            }
            CspBlock::C3 { cv1, cv2, cv3, m } => {
                let mut a = cv1.forward(s, x)?;
                for block in m {
                    a = block.forward(s, a)?;
                }
                let b = cv2.forward(s, x)?;
                let cat = s.tape.concat_channels(&[a, b])?;
                cv3.forward(s, cat)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBnAct,
    block: CspBlock,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBnAct,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Adds the `backbone.*` parameters to `init`'s store.
    pub fn new<R: Rng + ?Sized>(init: &mut Init<R>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let act: Activation = config.activation.into();
        let stem_c = config.stem_width();
        let stem = ConvBnAct::new(init, "backbone.stem", 3, stem_c, 3, 2, act)?;
        let mut cin = stem_c;
        let mut stages = Vec::new();
        for (i, (&c, &n)) in config.widths().iter().zip(&config.depths()).enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            let down = ConvBnAct::new(init, &format!("{name}.down"), cin, c, 3, 2, act)?;
            let block = CspBlock::new(init, &format!("{name}.csp"), c, n, config.style, act)?;
            stages.push(Stage { down, block });
            cin = c;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Stride 8, 16 and 32 feature maps.
    pub fn forward_features(&self, s: &mut Session, x: Var) -> Result<[Var; 3]> {
        let (_, c, h, w) = s.tape.value(x).dims4("forward_features")?;
        if c != 3 {
            return Err(Error::shape("forward_features", "channels", format!("expected 3 input channels, got {c}")));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "forward_features",
                "spatial",
                format!("input {h}x{w}: height and width must be divisible by {MAX_STRIDE}"),
            ));
        }
        let mut y = self.stem.forward(s, x)?;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.down.forward(s, y)?;
            y = stage.block.forward(s, y)?;
            if i >= 1 {
                outs.push(y);
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Hidden width; the deepest backbone channel count when absent.
    pub hidden: Option<usize>,
    pub out_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            out_dim: 128,
        }
    }
}

/// Two-layer MLP mapping pooled features into the contrastive space.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
    out_dim: usize,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(init: &mut Init<R>, in_dim: usize, config: &ProjectionConfig, act: Activation) -> Result<Self> {
        if config.out_dim == 0 || config.hidden == Some(0) {
            return Err(Error::config("projection.out_dim", "must be positive"));
        }
        let hidden = config.hidden.unwrap_or(in_dim);
        Ok(Self {
            fc1: Linear::new(init, "projection.fc1", in_dim, hidden)?,
            fc2: Linear::new(init, "projection.fc2", hidden, config.out_dim)?,
            act,
            out_dim: config.out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.fc1.forward(s, x)?;
        let y = s.tape.activation(y, self.act)?;
        self.fc2.forward(s, y)
    }
}

/// Backbone plus projection head: the network trained by contrastive
/// pretraining.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: ProjectionHead,
}

impl Encoder {
    /// The backbone draws from the same seed stream as a detector built with
    /// the same seed.
    pub fn new(backbone: &BackboneConfig, projection: &ProjectionConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[streams::INIT]);
        let bb = Backbone::new(&mut Init::new(&mut store, &mut rng, InitScheme::FanIn), backbone)?;
        let mut rng = rng_from(seed, &[streams::HEAD_INIT]);
        let deep = backbone.feature_channels()[2];
        let head = ProjectionHead::new(
            &mut Init::new(&mut store, &mut rng, InitScheme::Glorot),
            deep,
            projection,
            backbone.activation.into(),
        )?;
        Ok(Self { store, backbone: bb, head })
    }

    /// Embeds a batch: deepest map → global average pool → MLP → unit rows.
    pub fn encode(&mut self, batch: Tensor, train: bool, grad: bool) -> Result<EncodeOutput<'_>> {
        let Encoder { store, backbone, head } = self;
        let mut s = Session::new(store, train, grad);
        let x = s.input(batch);
        let z = encode(&mut s, backbone, head, x)?;
        Ok(EncodeOutput { session: s, embeddings: z })
    }
}

pub struct EncodeOutput<'s> {
    pub session: Session<'s>,
    pub embeddings: Var,
}

pub fn encode(s: &mut Session, backbone: &Backbone, head: &ProjectionHead, x: Var) -> Result<Var> {
    let [_, _, deep] = backbone.forward_features(s, x)?;
    let pooled = s.tape.global_avg_pool(deep)?;
    let z = head.forward(s, pooled)?;
    s.tape.l2_normalize(z)
}
