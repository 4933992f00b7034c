//! Anchor-free single-class detector: top-down neck and decoupled head over
//! the backbone's stride 8/16/32 maps, with box (CIoU), class (BCE) and
//! distribution focal losses.
//!
//! Parameter namespace beyond `backbone.*`:
//!
//! ```text
//! neck.lat5, neck.p4, neck.p3                    {conv.weight, bn.*}
//! head.p{3,4,5}.{box,cls}.conv                  {conv.weight, bn.*}
//! head.p{3,4,5}.{box,cls}.pred                  {weight, bias}
//! ```

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, CustomOp, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, BACKBONE_PREFIX, FEATURE_STRIDES};
use crate::boxes::{Detection, GroundTruthBox, Rect};
use crate::error::{CheckpointError, Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::eval::nms;
use crate::io::metrics::LossParts;
use crate::nn::{Conv2d, ConvBnAct, Init, InitScheme, ParamStore, Session};
use crate::rng::{rng_from, streams};
use crate::tensor::Tensor;

/// Predictions narrower or shorter than this many pixels are discarded.
pub const MIN_DETECTION_SIZE: f32 = 1.0;
pub const MAX_DETECTIONS: usize = 300;
const EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub neck_channels: usize,
    /// DFL bins per box side.
    pub bins: usize,
    pub box_gain: f64,
    pub cls_gain: f64,
    pub dfl_gain: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            neck_channels: 64,
            bins: 16,
            box_gain: 7.5,
            cls_gain: 0.5,
            dfl_gain: 1.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neck_channels == 0 {
            return Err(Error::config("model.head.neck_channels", "must be positive"));
        }
        if self.bins < 2 {
            return Err(Error::config("model.head.bins", "need at least 2 bins"));
        }
        for (k, g) in [
            ("model.head.box_gain", self.box_gain),
            ("model.head.cls_gain", self.cls_gain),
            ("model.head.dfl_gain", self.dfl_gain),
        ] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config(k, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Branch {
    conv: ConvBnAct,
    pred: Conv2d,
}

impl Branch {
    fn new<R: Rng + ?Sized>(init: &mut Init<R>, name: &str, c: usize, out: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            conv: ConvBnAct::new(init, &format!("{name}.conv"), c, c, 3, 1, act)?,
            pred: Conv2d::new(init, &format!("{name}.pred"), c, out, 1)?,
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.pred.forward(s, y)
    }
}

/// Per-scale class logits `[N, 1, h, w]` and box logits `[N, 4B, h, w]`,
/// sides ordered left, top, right, bottom.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: [Var; 3],
    pub boxes: [Var; 3],
}

/// Layer definitions; parameters live in [`Detector::store`].
#[derive(Clone, Debug)]
pub struct DetectorNet {
    pub backbone: Backbone,
    head_config: HeadConfig,
    lat5: ConvBnAct,
    p4: ConvBnAct,
    p3: ConvBnAct,
    box_branches: [Branch; 3],
    cls_branches: [Branch; 3],
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub store: ParamStore,
    pub net: DetectorNet,
}

impl Detector {
    /// Backbone from the `INIT` stream (fan-in uniform), neck and head from
    /// `HEAD_INIT` (Glorot), so detectors built with one seed share their
    /// neck and head regardless of later backbone loading.
    pub fn new(backbone: &BackboneConfig, head: &HeadConfig, seed: u64) -> Result<Self> {
        head.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[streams::INIT]);
        let bb = Backbone::new(&mut Init::new(&mut store, &mut rng, InitScheme::FanIn), backbone)?;
        let mut rng = rng_from(seed, &[streams::HEAD_INIT]);
        let init = &mut Init::new(&mut store, &mut rng, InitScheme::Glorot);
        let act: Activation = backbone.activation.into();
        let [c3, c4, c5] = backbone.feature_channels();
        let nc = head.neck_channels;
        let lat5 = ConvBnAct::new(init, "neck.lat5", c5, nc, 1, 1, act)?;
        let p4 = ConvBnAct::new(init, "neck.p4", nc + c4, nc, 3, 1, act)?;
        let p3 = ConvBnAct::new(init, "neck.p3", nc + c3, nc, 3, 1, act)?;
        let mut boxes = Vec::new();
        let mut cls = Vec::new();
        for name in ["p3", "p4", "p5"] {
            boxes.push(Branch::new(init, &format!("head.{name}.box"), nc, 4 * head.bins, act)?);
            cls.push(Branch::new(init, &format!("head.{name}.cls"), nc, 1, act)?);
        }
        let net = DetectorNet {
            backbone: bb,
            head_config: head.clone(),
            lat5,
            p4,
            p3,
            box_branches: boxes.try_into().expect("three scales"),
            cls_branches: cls.try_into().expect("three scales"),
        };
        Ok(Self { store, net })
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.net.head_config
    }

    pub fn bins(&self) -> usize {
        self.net.head_config.bins
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with(BACKBONE_PREFIX)
    }

    /// Replaces every tensor from a full detector checkpoint.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut updates = Vec::with_capacity(self.store.len());
        for (id, name, p) in self.store.iter() {
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
        }
        for (id, t) in updates {
            self.store.get_mut(id).tensor = t;
        }
        Ok(())
    }

    /// Runs the network on a batch; the session keeps the tape alive for a
    /// following loss and backward.
    pub fn run(&mut self, batch: Tensor, train: bool, grad: bool) -> Result<(Session<'_>, HeadOutput)> {
        let Detector { store, net } = self;
        let mut s = Session::new(store, train, grad);
        let x = s.input(batch);
        let out = net.forward(&mut s, x)?;
        Ok((s, out))
    }
}

impl DetectorNet {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<HeadOutput> {
        let [c3, c4, c5] = self.backbone.forward_features(s, x)?;
        let n5 = self.lat5.forward(s, c5)?;
        let up = s.tape.upsample2x(n5)?;
        let cat = s.tape.concat_channels(&[up, c4])?;
        let n4 = self.p4.forward(s, cat)?;
        let up = s.tape.upsample2x(n4)?;
        let cat = s.tape.concat_channels(&[up, c3])?;
        let n3 = self.p3.forward(s, cat)?;
        let feats = [n3, n4, n5];
        let mut cls = Vec::with_capacity(3);
        let mut boxes = Vec::with_capacity(3);
        for k in 0..3 {
            cls.push(self.cls_branches[k].forward(s, feats[k])?);
            boxes.push(self.box_branches[k].forward(s, feats[k])?);
        }
        Ok(HeadOutput {
            cls: [cls[0], cls[1], cls[2]],
            boxes: [boxes[0], boxes[1], boxes[2]],
        })
    }
}

/// Targets of one scale for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAssignment {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Matched ground-truth index per cell, row-major.
    pub matched: Vec<Option<usize>>,
    /// Left, top, right, bottom distances in stride units per cell.
    pub targets: Vec<[f32; 4]>,
}

impl ScaleAssignment {
    pub fn positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn cell_center(&self, cell: usize) -> (f32, f32) {
        let s = self.stride as f32;
        (((cell % self.width) as f32 + 0.5) * s, ((cell / self.width) as f32 + 0.5) * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub scales: [ScaleAssignment; 3],
    /// Ground truth in pixels.
    pub gts: Vec<Rect>,
}

impl Assignment {
    pub fn positives(&self) -> usize {
        self.scales.iter().map(ScaleAssignment::positives).sum()
    }
}

/// Largest stride `s` with `max(w, h) / s >= 2`, else 8; returns its index.
pub fn scale_for(r: &Rect) -> usize {
    let m = r.width().max(r.height());
    (0..3).rev().find(|&k| m / FEATURE_STRIDES[k] as f32 >= 2.0).unwrap_or(0)
}

/// Static center-neighbourhood assignment. Cells of the 3×3 block around the
/// cell holding a box's center are positive when their centers lie inside
/// the box; when none does, the center cell alone is used. A cell claimed
/// by several boxes goes to the smallest.
pub fn assign_targets(gts: &[GroundTruthBox], width: usize, height: usize, bins: usize) -> Assignment {
    let mut scales: Vec<ScaleAssignment> = FEATURE_STRIDES
        .iter()
        .map(|&s| {
            let (h, w) = (height / s, width / s);
            ScaleAssignment {
                stride: s,
                height: h,
                width: w,
                matched: vec![None; h * w],
                targets: vec![[0.0; 4]; h * w],
            }
        })
        .collect();
    let rects: Vec<Rect> = gts.iter().map(|g| g.to_rect(width, height).clip(width as f32, height as f32)).collect();
    let max_t = (bins - 1) as f32;
    for (g, r) in rects.iter().enumerate() {
        if r.width() <= 0.0 || r.height() <= 0.0 {
            continue;
        }
        let sa = &mut scales[scale_for(r)];
        let s = sa.stride as f32;
        let (cx, cy) = r.center();
        let ci = ((cy / s) as usize).min(sa.height - 1) as i64;
        let cj = ((cx / s) as usize).min(sa.width - 1) as i64;
        let mut cells = Vec::new();
        for di in -1..=1 {
            for dj in -1..=1 {
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= sa.height as i64 || j >= sa.width as i64 {
                    continue;
                }
                let cell = i as usize * sa.width + j as usize;
                let (x, y) = sa.cell_center(cell);
                if r.contains(x, y) {
                    cells.push(cell);
                }
            }
        }
        if cells.is_empty() {
            cells.push(ci as usize * sa.width + cj as usize);
        }
        for cell in cells {
            if let Some(other) = sa.matched[cell] {
                if rects[other].area() <= r.area() {
                    continue;
                }
            }
            let (x, y) = sa.cell_center(cell);
            sa.matched[cell] = Some(g);
            sa.targets[cell] = [
                ((x - r.x_min) / s).clamp(0.0, max_t),
                ((y - r.y_min) / s).clamp(0.0, max_t),
                ((r.x_max - x) / s).clamp(0.0, max_t),
                ((r.y_max - y) / s).clamp(0.0, max_t),
            ];
        }
    }
    Assignment {
        scales: scales.try_into().expect("three scales"),
        gts: rects,
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

/// Bin weights of a target: `(l, w_l, r, w_r)`.
fn dfl_split(t: f64) -> (usize, f64, usize, f64) {
    let l = t.floor() as usize;
    if t == l as f64 {
        (l, 1.0, l, 0.0)
    } else {
        (l, (l + 1) as f64 - t, l + 1, t - l as f64)
    }
}

/// `−((r − t)·ln S_l + (t − l)·ln S_r)` over softmax `S` of `logits`.
pub fn dfl_loss(logits: &[f64], t: f64) -> Result<f64> {
    let b = logits.len();
    if b < 2 {
        return Err(Error::invalid("dfl needs at least 2 bins"));
    }
    if !(0.0..=(b - 1) as f64).contains(&t) {
        return Err(Error::invalid(format!("dfl target {t} outside [0, {}]", b - 1)));
    }
    let s = softmax(logits);
    let (l, wl, r, wr) = dfl_split(t);
    Ok(-(wl * s[l].ln() + if wr > 0.0 { wr * s[r].ln() } else { 0.0 }))
}

/// Expected bin index of a side distribution.
pub fn expected_bin(logits: &[f32]) -> f64 {
    let s = softmax(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    s.iter().enumerate().map(|(b, p)| b as f64 * p).sum()
}

/// Decodes `[N, 4B, h, w]` box logits into one pixel box per cell, image
/// major, cells row-major.
pub fn decode_boxes(logits: &Tensor, stride: usize, bins: usize) -> Result<Vec<Rect>> {
    let (n, c, h, w) = logits.dims4("decode_boxes")?;
    if c != 4 * bins {
        return Err(Error::shape("decode_boxes", "channels", format!("expected {} channels, got {c}", 4 * bins)));
    }
    let d = logits.data();
    let hw = h * w;
    let s = stride as f32;
    let mut out = Vec::with_capacity(n * hw);
    let mut side = vec![0f32; bins];
    for b in 0..n {
        for cell in 0..hw {
            let mut dist = [0f32; 4];
            for (q, dq) in dist.iter_mut().enumerate() {
                for (k, v) in side.iter_mut().enumerate() {
                    *v = d[(b * c + q * bins + k) * hw + cell];
                }
                *dq = expected_bin(&side) as f32 * s;
            }
            let (x, y) = (((cell % w) as f32 + 0.5) * s, ((cell / w) as f32 + 0.5) * s);
            out.push(Rect::new(x - dist[0], y - dist[1], x + dist[2], y + dist[3]));
        }
    }
    Ok(out)
}

/// Value with gradient against four inputs.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    fn sq(self) -> Self {
        self * self
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)),
        }
    }
}

fn ciou_dual(p: [Dual; 4], g: [f64; 4]) -> Dual {
    let [px1, py1, px2, py2] = p;
    let [gx1, gy1, gx2, gy2] = g.map(Dual::c);
    let zero = Dual::c(0.0);
    let eps = Dual::c(EPS);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(zero);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(zero);
    let inter = iw * ih;
    let (wp, hp) = (px2 - px1, py2 - py1);
    let (wg, hg) = (gx2 - gx1, gy2 - gy1);
    let union = wp * hp + wg * hg - inter + eps;
    let iou = inter / union;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw.sq() + ch.sq() + eps;
    let rho2 = ((px1 + px2 - gx1 - gx2).sq() + (py1 + py2 - gy1 - gy2).sq()) / Dual::c(4.0);
    let v = Dual::c(4.0 / (PI * PI)) * ((wg / (hg + eps)).atan() - (wp / (hp + eps)).atan()).sq();
    let alpha = v / (Dual::c(1.0) - iou + v + eps);
    iou - rho2 / c2 - alpha * v
}

/// Complete IoU: IoU minus normalized center distance and aspect penalty.
pub fn ciou(a: &Rect, b: &Rect) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::invalid(format!("ciou of zero-area box: {a:?} vs {b:?}")));
    }
    let p = [a.x_min, a.y_min, a.x_max, a.y_max].map(|v| Dual::c(v as f64));
    let g = [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v as f64);
    Ok(ciou_dual(p, g).v)
}

struct DetectionLoss {
    grads: Vec<Vec<f32>>,
}

impl CustomOp for DetectionLoss {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], out_grad: &[f32], need: &[bool]) -> Vec<Option<Vec<f32>>> {
        let k = out_grad[0];
        self.grads
            .iter()
            .zip(need)
            .map(|(g, &n)| n.then(|| g.iter().map(|v| v * k).collect()))
            .collect()
    }
}

pub struct LossOutput {
    pub total: Var,
    /// Gain-weighted components.
    pub parts: LossParts,
    pub positives: usize,
}

/// Box, class and DFL losses over a batch. `assignments[b]` belongs to
/// image `b`.
pub fn detection_loss(tape: &mut Tape, head: &HeadOutput, assignments: &[Assignment], cfg: &HeadConfig) -> Result<LossOutput> {
    const OP: &str = "detection_loss";
    let bins = cfg.bins;
    let mut inputs = Vec::with_capacity(6);
    let mut npos = 0usize;
    let mut ncells = 0usize;
    for k in 0..3 {
        let (n, c, h, w) = tape.value(head.cls[k]).dims4(OP)?;
        let (nb, cb, hb, wb) = tape.value(head.boxes[k]).dims4(OP)?;
        if c != 1 || cb != 4 * bins || (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(OP, "head", format!("scale {k}: cls [{n},{c},{h},{w}] box [{nb},{cb},{hb},{wb}]")));
        }
        if n != assignments.len() {
            return Err(Error::shape(OP, "batch", format!("{n} images, {} assignments", assignments.len())));
        }
        for a in assignments {
            let sa = &a.scales[k];
            if (sa.height, sa.width) != (h, w) {
                return Err(Error::shape(OP, "grid", format!("scale {k}: head {h}x{w}, assignment {}x{}", sa.height, sa.width)));
            }
            npos += sa.positives();
        }
        ncells += n * h * w;
    }
    inputs.extend(head.cls);
    inputs.extend(head.boxes);
    let wc = cfg.cls_gain / if npos > 0 { npos } else { ncells } as f64;
    let wb = cfg.box_gain / npos.max(1) as f64;
    let wd = cfg.dfl_gain / (4 * npos.max(1)) as f64;
    let mut parts = LossParts::default();
    let mut grads: Vec<Vec<f32>> = inputs.iter().map(|&v| vec![0.0; tape.value(v).numel()]).collect();
    let mut side = vec![0f64; bins];
    for k in 0..3 {
        let cls = tape.value(head.cls[k]).data();
        let bx = tape.value(head.boxes[k]).data();
        let (hh, ww) = (assignments[0].scales[k].height, assignments[0].scales[k].width);
        let hw = hh * ww;
        let (gc, rest) = grads.split_at_mut(3);
        let gcls = &mut gc[k];
        let gbox = &mut rest[k];
        for (b, a) in assignments.iter().enumerate() {
            let sa = &a.scales[k];
            let s = sa.stride as f64;
            for cell in 0..hw {
                let z = cls[b * hw + cell] as f64;
                let y = if sa.matched[cell].is_some() { 1.0 } else { 0.0 };
                let bce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                parts.cls_loss += wc * bce;
                let sig = 1.0 / (1.0 + (-z).exp());
                gcls[b * hw + cell] = (wc * (sig - y)) as f32;
                let Some(g) = sa.matched[cell] else { continue };
                let (cx, cy) = sa.cell_center(cell);
                let (cx, cy) = (cx as f64, cy as f64);
                let mut probs = Vec::with_capacity(4);
                let mut e = [0f64; 4];
                for q in 0..4 {
                    for (kb, v) in side.iter_mut().enumerate() {
                        *v = bx[((b * 4 + q) * bins + kb) * hw + cell] as f64;
                    }
                    let sm = softmax(&side);
                    e[q] = sm.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
                    let t = sa.targets[cell][q] as f64;
                    let (l, wl, r, wr) = dfl_split(t);
                    parts.dfl_loss -= wd * (wl * sm[l].ln() + if wr > 0.0 { wr * sm[r].ln() } else { 0.0 });
                    for (kb, p) in sm.iter().enumerate() {
                        let target = if kb == l { wl } else { 0.0 } + if kb == r && wr > 0.0 { wr } else { 0.0 };
                        gbox[((b * 4 + q) * bins + kb) * hw + cell] += (wd * (p - target)) as f32;
                    }
                    probs.push(sm);
                }
                let ed: [Dual; 4] = std::array::from_fn(|q| Dual::var(e[q], q));
                let sd = Dual::c(s);
                let pred = [
                    Dual::c(cx) - ed[0] * sd,
                    Dual::c(cy) - ed[1] * sd,
                    Dual::c(cx) + ed[2] * sd,
                    Dual::c(cy) + ed[3] * sd,
                ];
                let gt = a.gts[g];
                let c = ciou_dual(pred, [gt.x_min as f64, gt.y_min as f64, gt.x_max as f64, gt.y_max as f64]);
                parts.box_loss += wb * (1.0 - c.v);
                for q in 0..4 {
                    let de = -wb * c.d[q];
                    for (kb, p) in probs[q].iter().enumerate() {
                        gbox[((b * 4 + q) * bins + kb) * hw + cell] += (de * p * (kb as f64 - e[q])) as f32;
                    }
                }
            }
        }
    }
    let total = parts.total();
    let op = DetectionLoss { grads };
    let v = tape.custom(&inputs, Tensor::scalar(total as f32), Some(total), Box::new(op))?;
    Ok(LossOutput {
        total: v,
        parts,
        positives: npos,
    })
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Detections for every image of an evaluated head output.
pub fn postprocess(tape: &Tape, head: &HeadOutput, bins: usize, width: usize, height: usize, conf_thresh: f32, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
    let n = tape.value(head.cls[0]).shape()[0];
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for k in 0..3 {
        let cls = tape.value(head.cls[k]);
        let (_, _, h, w) = cls.dims4("predict")?;
        let hw = h * w;
        let mut keep = Vec::new();
        for (i, &z) in cls.data().iter().enumerate() {
            let score = sigmoid(z);
            if score > conf_thresh {
                keep.push((i / hw, i % hw, score));
            }
        }
        if keep.is_empty() {
            continue;
        }
        let rects = decode_boxes(tape.value(head.boxes[k]), FEATURE_STRIDES[k], bins)?;
        for (b, cell, score) in keep {
            let r = rects[b * hw + cell].clip(width as f32, height as f32);
            if r.width() >= MIN_DETECTION_SIZE && r.height() >= MIN_DETECTION_SIZE {
                per_image[b].push(Detection { bbox: r, score });
            }
        }
    }
    Ok(per_image
        .into_iter()
        .map(|d| {
            let mut kept = nms(&d, iou_thresh);
            kept.truncate(MAX_DETECTIONS);
            kept
        })
        .collect())
}

/// Eval-mode forward, score threshold, decoding and NMS. `images` is
/// `[N, 3, H, W]`.
pub fn predict_batch(det: &mut Detector, images: Tensor, conf_thresh: f32, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
    let (_, _, h, w) = images.dims4("predict")?;
    let bins = det.bins();
    let (s, head) = det.run(images, false, false)?;
    postprocess(&s.tape, &head, bins, w, h, conf_thresh, iou_thresh)
}

pub fn predict(det: &mut Detector, image: &Tensor, conf_thresh: f32, iou_thresh: f64) -> Result<Vec<Detection>> {
    let batch = Tensor::stack(&[image])?;
    Ok(predict_batch(det, batch, conf_thresh, iou_thresh)?.remove(0))
}
