//! Seeded synthetic scenes.
//!
//! Backgrounds are light gradients with pixel noise and clutter (discs,
//! rings, bars). Targets are two rings joined by a bar, drawn in dark
//! colors at random scale and rotation. Only targets are labeled.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{GroundTruthBox, Rect};
use crate::error::{Error, Result};
use crate::rng::{rng_from, streams};
use crate::tensor::Tensor;

use super::image::encode_ppm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_unlabeled: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Side of labeled images.
    pub image_size: usize,
    /// Side of unlabeled images.
    pub unlabeled_size: usize,
    pub max_targets: usize,
    pub max_clutter: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_unlabeled: 2000,
            n_train: 200,
            n_val: 100,
            image_size: 128,
            unlabeled_size: 64,
            max_targets: 3,
            max_clutter: 6,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("synth.n_unlabeled", self.n_unlabeled),
            ("synth.n_train", self.n_train),
            ("synth.n_val", self.n_val),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        for (k, v) in [("synth.image_size", self.image_size), ("synth.unlabeled_size", self.unlabeled_size)] {
            if v < 32 {
                return Err(Error::config(k, "must be at least 32"));
            }
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config("synth.noise", "must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// A rendered scene: pixels, label boxes and, per target, the pixel mask
/// extent actually drawn.
pub struct Scene {
    pub pixels: Tensor,
    pub boxes: Vec<GroundTruthBox>,
    pub drawn: Vec<Rect>,
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn paint(&mut self, color: [f32; 3], bounds: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool) -> Option<Rect> {
        let n = self.size;
        let clampi = |v: f64| v.floor().clamp(0.0, n as f64) as usize;
        let (x0, y0) = (clampi(bounds.0), clampi(bounds.1));
        let (x1, y1) = ((bounds.2.ceil().max(0.0) as usize).min(n), (bounds.3.ceil().max(0.0) as usize).min(n));
        let mut ext: Option<Rect> = None;
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        self.data[c * n * n + y * n + x] = color[c];
                    }
                    let px = Rect::new(x as f32, y as f32, x as f32 + 1.0, y as f32 + 1.0);
                    ext = Some(match ext {
                        None => px,
                        Some(e) => Rect::new(e.x_min.min(px.x_min), e.y_min.min(px.y_min), e.x_max.max(px.x_max), e.y_max.max(px.y_max)),
                    });
                }
            }
        }
        ext
    }
}

fn dark(rng: &mut ChaCha8Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.gen_range(0.0..0.35))
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

struct Glyph {
    wheels: [(f64, f64); 2],
    radius: f64,
    ring: f64,
    bar: f64,
}

impl Glyph {
    fn sample(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let radius = rng.gen_range(0.04..0.12) * size;
        let dist = radius * rng.gen_range(2.2..3.2);
        let angle = rng.gen_range(-PI / 6.0..PI / 6.0);
        let (half_w, half_h) = (dist * angle.cos().abs() / 2.0 + radius, dist * angle.sin().abs() / 2.0 + radius);
        let cx = rng.gen_range(half_w..size - half_w);
        let cy = rng.gen_range(half_h..size - half_h);
        let (dx, dy) = (dist * angle.cos() / 2.0, dist * angle.sin() / 2.0);
        Self {
            wheels: [(cx - dx, cy - dy), (cx + dx, cy + dy)],
            radius,
            ring: (radius * 0.3).max(1.5),
            bar: (radius * 0.35).max(1.5),
        }
    }

    fn bounds(&self) -> Rect {
        let [(ax, ay), (bx, by)] = self.wheels;
        let r = self.radius;
        Rect::new((ax.min(bx) - r) as f32, (ay.min(by) - r) as f32, (ax.max(bx) + r) as f32, (ay.max(by) + r) as f32)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let on_ring = self.wheels.iter().any(|&(wx, wy)| {
            let d = ((x - wx).powi(2) + (y - wy).powi(2)).sqrt();
            d <= self.radius && d >= self.radius - self.ring
        });
        on_ring || segment_distance(x, y, self.wheels[0], self.wheels[1]) <= self.bar / 2.0
    }
}

/// Renders one scene with `targets` glyphs.
pub fn render_scene(rng: &mut ChaCha8Rng, size: usize, targets: usize, cfg: &SynthConfig) -> Scene {
    let s = size as f64;
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * gx + (y as f64 / s - 0.5) * gy) + 0.71) / 1.42;
            for c in 0..3 {
                data[c * size * size + y * size + x] = c0[c] + (c1[c] - c0[c]) * t as f32;
            }
        }
    }
    let mut canvas = Canvas { size, data };
    let clutter = rng.gen_range(0..=cfg.max_clutter);
    for _ in 0..clutter {
        let color = dark(rng);
        let (x, y) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        match rng.gen_range(0..3) {
            0 => {
                let r = rng.gen_range(0.02..0.1) * s;
                canvas.paint(color, (x - r, y - r, x + r, y + r), |px, py| (px - x).powi(2) + (py - y).powi(2) <= r * r);
            }
            1 => {
                let r = rng.gen_range(0.04..0.12) * s;
                let w = (r * 0.3).max(1.5);
                canvas.paint(color, (x - r, y - r, x + r, y + r), |px, py| {
                    let d = ((px - x).powi(2) + (py - y).powi(2)).sqrt();
                    d <= r && d >= r - w
                });
            }
            _ => {
                let len = rng.gen_range(0.08..0.35) * s;
                let a = rng.gen_range(0.0..PI);
                let th = rng.gen_range(1.5..0.05 * s + 2.0);
                let (ex, ey) = (x + len * a.cos(), y + len * a.sin());
                let pad = th;
                canvas.paint(color, (x.min(ex) - pad, y.min(ey) - pad, x.max(ex) + pad, y.max(ey) + pad), |px, py| {
                    segment_distance(px, py, (x, y), (ex, ey)) <= th / 2.0
                });
            }
        }
    }
    let mut boxes = Vec::new();
    let mut drawn = Vec::new();
    for _ in 0..targets {
        let g = Glyph::sample(rng, s);
        let color = dark(rng);
        let b = g.bounds();
        let ext = canvas.paint(color, (b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64), |x, y| g.contains(x, y));
        let clipped = b.clip(s as f32, s as f32);
        boxes.push(GroundTruthBox::from_rect(&clipped, size, size));
        drawn.push(ext.unwrap_or(clipped));
    }
    let mut data = canvas.data;
    if cfg.noise > 0.0 {
        for v in data.iter_mut() {
            let n: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.866;
            *v = (*v + (n * cfg.noise) as f32).clamp(0.0, 1.0);
        }
    }
    Scene {
        pixels: Tensor::new(vec![3, size, size], data).expect("valid canvas"),
        boxes,
        drawn,
    }
}

pub fn format_labels(boxes: &[GroundTruthBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

const SPLITS: [(&str, u64); 3] = [("unlabeled", 0), ("train", 1), ("val", 2)];

/// Scene `index` of split `split` (0 unlabeled, 1 train, 2 val).
pub fn scene_for(cfg: &SynthConfig, split: u64, index: usize) -> Scene {
    let mut rng = rng_from(cfg.seed, &[streams::SYNTH, split, index as u64]);
    let size = if split == 0 { cfg.unlabeled_size } else { cfg.image_size };
    let targets = rng.gen_range(0..=cfg.max_targets);
    render_scene(&mut rng, size, targets, cfg)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSummary {
    pub unlabeled: usize,
    pub train: usize,
    pub val: usize,
    pub train_boxes: usize,
    pub val_boxes: usize,
}

/// Writes `unlabeled/`, `train/{images,labels}/`, `val/{images,labels}/` and
/// `manifest.txt` under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut summary = SynthSummary::default();
    let mut manifest = format!(
        "seed {}\nimage_size {}\nunlabeled_size {}\n",
        cfg.seed, cfg.image_size, cfg.unlabeled_size
    );
    for (name, split) in SPLITS {
        let n = match split {
            0 => cfg.n_unlabeled,
            1 => cfg.n_train,
            _ => cfg.n_val,
        };
        let boxes: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| {
                let scene = scene_for(cfg, split, i);
                let stem = format!("{name}_{i:05}");
                let bytes = encode_ppm(&scene.pixels)?;
                if split == 0 {
                    super::write_file(&out.join(name).join(format!("{stem}.ppm")), &bytes)?;
                } else {
                    super::write_file(&out.join(name).join("images").join(format!("{stem}.ppm")), &bytes)?;
                    let labels = format_labels(&scene.boxes);
                    super::write_file(&out.join(name).join("labels").join(format!("{stem}.txt")), labels.as_bytes())?;
                }
                Ok(scene.boxes.len())
            })
            .collect::<Result<_>>()?;
        let total: usize = boxes.iter().sum();
        match split {
            0 => summary.unlabeled = n,
            1 => (summary.train, summary.train_boxes) = (n, total),
            _ => (summary.val, summary.val_boxes) = (n, total),
        }
        manifest.push_str(&format!("{name} {n} images {total} boxes\n"));
    }
    super::write_file(&out.join("manifest.txt"), manifest.as_bytes())?;
    Ok(summary)
}
