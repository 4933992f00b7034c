//! Seeded image transforms.
//!
//! Images are planar `[3, H, W]` tensors with values in `[0, 1]`. Every
//! transform takes its randomness from the caller's rng, so fixing the seed
//! fixes the output bytes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{GroundTruthBox, Rect};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Boxes smaller than this many pixels on either side are dropped after a
/// geometric transform.
pub const MIN_BOX_PIXELS: f32 = 2.0;
/// Fill value for pixels with no source.
pub const PAD_VALUE: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub boxes: Vec<GroundTruthBox>,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor, boxes: Vec<GroundTruthBox>, source_id: impl Into<String>) -> Result<Self> {
        let (c, _, _) = chw(&pixels)?;
        if c != 3 {
            return Err(Error::shape("ImageSample", "channels", format!("expected 3, got {c}")));
        }
        Ok(Self {
            pixels,
            boxes,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    fn with_pixels(&self, pixels: Tensor, boxes: Vec<GroundTruthBox>) -> Self {
        Self {
            pixels,
            boxes,
            source_id: self.source_id.clone(),
        }
    }
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("image", "rank", format!("expected [C, H, W], got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: ImageSample,
    pub view_b: ImageSample,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Probability that color jitter is applied at all.
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
    pub output_size: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
            output_size: 64,
        }
    }
}

fn check_prob(key: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(key, format!("probability {p} outside [0, 1]")))
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("augment.crop_scale", "need 0 < lo <= hi <= 1"));
        }
        let (alo, ahi) = self.crop_aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::config("augment.crop_aspect", "need 0 < lo <= hi"));
        }
        for (k, v) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(k, "must be non-negative"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config("augment.hue", "must lie in [0, 0.5]"));
        }
        check_prob("augment.jitter_prob", self.jitter_prob)?;
        check_prob("augment.grayscale_prob", self.grayscale_prob)?;
        check_prob("augment.blur_prob", self.blur_prob)?;
        check_prob("augment.flip_prob", self.flip_prob)?;
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::config("augment.blur_sigma", "need 0 < lo <= hi"));
        }
        if self.output_size < 2 {
            return Err(Error::config("augment.output_size", "must be at least 2"));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = chw(src)?;
    let mut out = vec![0.0f32; c * out_h * out_w];
    let s = src.data();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |d: usize, scale: f64, n: usize| {
        let p = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, h);
        for ch in 0..c {
            let plane = &s[ch * h * w..(ch + 1) * h * w];
            let row = &mut out[(ch * out_h + y) * out_w..(ch * out_h + y + 1) * out_w];
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                row[x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn crop(src: &Tensor, r: &CropRect) -> Result<Tensor> {
    let (c, h, w) = chw(src)?;
    if r.x + r.w > w || r.y + r.h > h || r.w == 0 || r.h == 0 {
        return Err(Error::invalid(format!("crop {r:?} outside {w}x{h} image")));
    }
    let s = src.data();
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            let off = (ch * h + y) * w;
            out.extend_from_slice(&s[off + r.x..off + r.x + r.w]);
        }
    }
    Tensor::new(vec![c, r.h, r.w], out)
}

/// Maps, clips and filters boxes given a pixel-space transform of their
/// corners. `map` receives the four corners and returns the new hull.
fn remap_boxes(
    boxes: &[GroundTruthBox],
    (src_w, src_h): (usize, usize),
    (dst_w, dst_h): (usize, usize),
    map: impl Fn(f32, f32) -> (f32, f32),
) -> Vec<GroundTruthBox> {
    boxes
        .iter()
        .filter_map(|b| {
            let r = b.to_rect(src_w, src_h);
            let pts = [
                map(r.x_min, r.y_min),
                map(r.x_max, r.y_min),
                map(r.x_min, r.y_max),
                map(r.x_max, r.y_max),
            ];
            let hull = Rect::new(
                pts.iter().map(|p| p.0).fold(f32::INFINITY, f32::min),
                pts.iter().map(|p| p.1).fold(f32::INFINITY, f32::min),
                pts.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max),
                pts.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max),
            )
            .clip(dst_w as f32, dst_h as f32);
            (hull.width() >= MIN_BOX_PIXELS && hull.height() >= MIN_BOX_PIXELS).then(|| GroundTruthBox {
                class_id: b.class_id,
                ..GroundTruthBox::from_rect(&hull, dst_w, dst_h)
            })
        })
        .collect()
}

/// Integer crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Draws the crop: area fraction uniform in `crop_scale`, log-uniform aspect
/// in `crop_aspect`. Falls back to a center crop after 10 rejected draws.
pub fn sample_crop_rect<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R, policy: &AugmentPolicy) -> CropRect {
    let area = (height * width) as f64;
    let (alo, ahi) = (policy.crop_aspect.0.ln(), policy.crop_aspect.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale.0, policy.crop_scale.1);
        let aspect = uniform(rng, alo, ahi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.gen_range(0..=width - w);
            let y = rng.gen_range(0..=height - h);
            return CropRect { x, y, w, h };
        }
    }
    let ratio = width as f64 / height as f64;
    let (w, h) = if ratio < policy.crop_aspect.0 {
        (width, ((width as f64 / policy.crop_aspect.0).round() as usize).clamp(1, height))
    } else if ratio > policy.crop_aspect.1 {
        (((height as f64 * policy.crop_aspect.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropRect {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn random_resized_crop<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, policy: &AugmentPolicy) -> Result<ImageSample> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("image {w}x{h} too small to crop")));
    }
    let r = sample_crop_rect(h, w, rng, policy);
    let s = policy.output_size;
    let pixels = resize_bilinear(&crop(&img.pixels, &r)?, s, s)?;
    let (kx, ky) = (s as f32 / r.w as f32, s as f32 / r.h as f32);
    let boxes = remap_boxes(&img.boxes, (w, h), (s, s), |x, y| ((x - r.x as f32) * kx, (y - r.y as f32) * ky));
    Ok(img.with_pixels(pixels, boxes))
}

pub fn flip_horizontal(img: &ImageSample) -> ImageSample {
    let (c, h, w) = (3, img.height(), img.width());
    let s = img.pixels.data();
    let mut out = Vec::with_capacity(s.len());
    for row in 0..c * h {
        out.extend(s[row * w..(row + 1) * w].iter().rev());
    }
    let pixels = Tensor::new(img.pixels.shape().to_vec(), out).expect("same shape");
    let boxes = img.boxes.iter().map(|b| GroundTruthBox { cx: 1.0 - b.cx, ..*b }).collect();
    img.with_pixels(pixels, boxes)
}

pub fn horizontal_flip<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, prob: f64) -> ImageSample {
    if rng.gen_bool(prob) {
        flip_horizontal(img)
    } else {
        img.clone()
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) as f32
}

fn planes(img: &ImageSample) -> (usize, Vec<f32>) {
    (img.height() * img.width(), img.pixels.data().to_vec())
}

fn finish(img: &ImageSample, mut data: Vec<f32>) -> ImageSample {
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let pixels = Tensor::new(img.pixels.shape().to_vec(), data).expect("same shape");
    img.with_pixels(pixels, img.boxes.clone())
}

pub fn adjust_brightness(img: &ImageSample, factor: f32) -> ImageSample {
    let (_, d) = planes(img);
    finish(img, d.into_iter().map(|v| v * factor).collect())
}

/// Blends with the mean luma of the image.
pub fn adjust_contrast(img: &ImageSample, factor: f32) -> ImageSample {
    let (n, mut d) = planes(img);
    let mean = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i]) as f64).sum::<f64>() / n as f64;
    let m = mean as f32;
    d.iter_mut().for_each(|v| *v = (*v - m) * factor + m);
    finish(img, d)
}

/// Blends each pixel with its own luma.
pub fn adjust_saturation(img: &ImageSample, factor: f32) -> ImageSample {
    let (n, mut d) = planes(img);
    for i in 0..n {
        let g = luma(d[i], d[n + i], d[2 * n + i]);
        for c in 0..3 {
            d[c * n + i] = (d[c * n + i] - g) * factor + g;
        }
    }
    finish(img, d)
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &ImageSample, shift: f32) -> ImageSample {
    let (n, mut d) = planes(img);
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        d[i] = r;
        d[n + i] = g;
        d[2 * n + i] = b;
    }
    finish(img, d)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue in a random order. Components
/// with zero strength are skipped entirely.
pub fn color_jitter<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, policy: &AugmentPolicy) -> ImageSample {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut R, s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s) as f32;
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 if policy.brightness > 0.0 => adjust_brightness(&out, factor(rng, policy.brightness)),
            1 if policy.contrast > 0.0 => adjust_contrast(&out, factor(rng, policy.contrast)),
            2 if policy.saturation > 0.0 => adjust_saturation(&out, factor(rng, policy.saturation)),
            3 if policy.hue > 0.0 => adjust_hue(&out, uniform(rng, -policy.hue, policy.hue) as f32),
            _ => continue,
        };
    }
    out
}

pub fn to_grayscale(img: &ImageSample) -> ImageSample {
    let (n, mut d) = planes(img);
    for i in 0..n {
        let g = luma(d[i], d[n + i], d[2 * n + i]);
        for c in 0..3 {
            d[c * n + i] = g;
        }
    }
    finish(img, d)
}

pub fn random_grayscale<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, prob: f64) -> ImageSample {
    if rng.gen_bool(prob) {
        to_grayscale(img)
    } else {
        img.clone()
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable blur with reflected borders.
pub fn blur(img: &ImageSample, sigma: f64) -> ImageSample {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (img.height(), img.width());
    let src = img.pixels.data();
    let mut tmp = vec![0.0f64; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let t = &mut tmp[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                t[y * w + x] = (-r..=r)
                    .map(|o| k[(o + r) as usize] * plane[y * w + reflect(x as i64 + o, w)] as f64)
                    .sum();
            }
        }
        let o = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v: f64 = (-r..=r).map(|d| k[(d + r) as usize] * t[reflect(y as i64 + d, h) * w + x]).sum();
                o[y * w + x] = v as f32;
            }
        }
    }
    finish(img, out)
}

pub fn gaussian_blur<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, sigma_range: (f64, f64), prob: f64) -> ImageSample {
    if rng.gen_bool(prob) {
        let sigma = uniform(rng, sigma_range.0, sigma_range.1);
        blur(img, sigma)
    } else {
        img.clone()
    }
}

/// crop → flip → jitter → grayscale → blur.
pub fn simclr_view<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, policy: &AugmentPolicy) -> Result<ImageSample> {
    let mut v = random_resized_crop(img, rng, policy)?;
    v = horizontal_flip(&v, rng, policy.flip_prob);
    if rng.gen_bool(policy.jitter_prob) {
        v = color_jitter(&v, rng, policy);
    }
    v = random_grayscale(&v, rng, policy.grayscale_prob);
    v = gaussian_blur(&v, rng, policy.blur_sigma, policy.blur_prob);
    v.boxes.clear();
    Ok(v)
}

/// Two independent draws of the view pipeline, from sub-streams 0 and 1 of
/// `seed`.
pub fn make_view_pair(img: &ImageSample, seed: u64, policy: &AugmentPolicy) -> Result<ViewPair> {
    let view_a = simclr_view(img, &mut rng_from(seed, &[0]), policy)?;
    let view_b = simclr_view(img, &mut rng_from(seed, &[1]), policy)?;
    Ok(ViewPair {
        view_a,
        view_b,
        source_id: img.source_id.clone(),
    })
}

/// Four-image collage. Each source is resized to half the output size and
/// placed so that it touches the center point from one quadrant.
pub fn mosaic_at(samples: [&ImageSample; 4], center: (usize, usize), size: usize) -> Result<ImageSample> {
    let half = size / 2;
    if half == 0 || center.0 > size || center.1 > size {
        return Err(Error::invalid(format!("mosaic center {center:?} outside {size}x{size} canvas")));
    }
    let (xc, yc) = (center.0 as i64, center.1 as i64);
    let hs = half as i64;
    let mut canvas = vec![PAD_VALUE; 3 * size * size];
    let mut boxes = Vec::new();
    let origins = [(xc - hs, yc - hs), (xc, yc - hs), (xc - hs, yc), (xc, yc)];
    for (img, (ox, oy)) in samples.iter().zip(origins) {
        let tile = resize_bilinear(&img.pixels, half, half)?;
        let t = tile.data();
        for c in 0..3 {
            for y in 0..half {
                let cy = oy + y as i64;
                if !(0..size as i64).contains(&cy) {
                    continue;
                }
                for x in 0..half {
                    let cx = ox + x as i64;
                    if (0..size as i64).contains(&cx) {
                        canvas[(c * size + cy as usize) * size + cx as usize] = t[(c * half + y) * half + x];
                    }
                }
            }
        }
        let (kx, ky) = (half as f32 / img.width() as f32, half as f32 / img.height() as f32);
        boxes.extend(remap_boxes(&img.boxes, (img.width(), img.height()), (size, size), |x, y| {
            (x * kx + ox as f32, y * ky + oy as f32)
        }));
    }
    let pixels = Tensor::new(vec![3, size, size], canvas)?;
    Ok(ImageSample {
        pixels,
        boxes,
        source_id: format!("mosaic({})", samples.map(|s| s.source_id.as_str()).join(",")),
    })
}

/// Mosaic around a center drawn uniformly from the middle half of the canvas.
pub fn mosaic<R: Rng + ?Sized>(samples: [&ImageSample; 4], rng: &mut R, size: usize) -> Result<ImageSample> {
    let lo = size / 4;
    let hi = (3 * size / 4).max(lo);
    let center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    mosaic_at(samples, center, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineLimits {
    /// Maximum absolute rotation.
    pub degrees: f64,
    /// Maximum translation as a fraction of width and height.
    pub translate: f64,
    /// Scale drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
}

impl Default for AffineLimits {
    fn default() -> Self {
        Self {
            degrees: 5.0,
            translate: 0.1,
            scale: 0.25,
        }
    }
}

impl AffineLimits {
    pub fn identity() -> Self {
        Self {
            degrees: 0.0,
            translate: 0.0,
            scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.degrees >= 0.0 && self.translate >= 0.0 && (0.0..1.0).contains(&self.scale)) {
            return Err(Error::config("finetune.affine", "need degrees >= 0, translate >= 0, 0 <= scale < 1"));
        }
        Ok(())
    }
}

/// Concrete affine draw: rotate and scale about the image center, then
/// translate by `(dx, dy)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub degrees: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

impl AffineParams {
    pub fn sample<R: Rng + ?Sized>(limits: &AffineLimits, rng: &mut R, width: usize, height: usize) -> Self {
        Self {
            degrees: uniform(rng, -limits.degrees, limits.degrees),
            scale: uniform(rng, 1.0 - limits.scale, 1.0 + limits.scale),
            dx: uniform(rng, -limits.translate, limits.translate) * width as f64,
            dy: uniform(rng, -limits.translate, limits.translate) * height as f64,
        }
    }

    fn is_identity(&self) -> bool {
        self.degrees == 0.0 && self.scale == 1.0 && self.dx == 0.0 && self.dy == 0.0
    }
}

pub fn affine_with(img: &ImageSample, p: &AffineParams) -> ImageSample {
    if p.is_identity() {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = p.degrees.to_radians().sin_cos();
    let fwd = |x: f64, y: f64| {
        let (u, v) = (x - cx, y - cy);
        (p.scale * (cos * u - sin * v) + cx + p.dx, p.scale * (sin * u + cos * v) + cy + p.dy)
    };
    let inv = |x: f64, y: f64| {
        let (u, v) = ((x - cx - p.dx) / p.scale, (y - cy - p.dy) / p.scale);
        (cos * u + sin * v + cx, -sin * u + cos * v + cy)
    };
    let src = img.pixels.data();
    let mut out = vec![PAD_VALUE; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv(x as f64 + 0.5, y as f64 + 0.5);
            let (sx, sy) = (sx - 0.5, sy - 0.5);
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let pl = &src[c * h * w..(c + 1) * h * w];
                let top = pl[y0 * w + x0] * (1.0 - fx) + pl[y0 * w + x1] * fx;
                let bot = pl[y1 * w + x0] * (1.0 - fx) + pl[y1 * w + x1] * fx;
                out[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let boxes = remap_boxes(&img.boxes, (w, h), (w, h), |x, y| {
        let (a, b) = fwd(x as f64, y as f64);
        (a as f32, b as f32)
    });
    let mut res = finish(img, out);
    res.boxes = boxes;
    res
}

pub fn random_affine<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R, limits: &AffineLimits) -> ImageSample {
    let p = AffineParams::sample(limits, rng, img.width(), img.height());
    affine_with(img, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..3 * h * w).map(|_| rng.gen::<f32>()).collect();
        ImageSample::new(Tensor::new(vec![3, h, w], d).unwrap(), vec![], "n").unwrap()
    }

    fn solid(h: usize, w: usize, rgb: [f32; 3]) -> ImageSample {
        let d = rgb.iter().flat_map(|&v| std::iter::repeat(v).take(h * w)).collect();
        ImageSample::new(Tensor::new(vec![3, h, w], d).unwrap(), vec![], "s").unwrap()
    }

    #[test]
    fn full_crop_is_resize() {
        let img = noise(32, 32, 1);
        let policy = AugmentPolicy {
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            output_size: 32,
            ..Default::default()
        };
        let out = random_resized_crop(&img, &mut ChaCha8Rng::seed_from_u64(0), &policy).unwrap();
        assert_eq!(out.pixels, img.pixels);
        let policy = AugmentPolicy { output_size: 16, ..policy };
        let out = random_resized_crop(&img, &mut ChaCha8Rng::seed_from_u64(0), &policy).unwrap();
        assert_eq!(out.pixels, resize_bilinear(&img.pixels, 16, 16).unwrap());
    }

    #[test]
    fn crop_rect_deterministic() {
        let p = AugmentPolicy::default();
        let a = sample_crop_rect(50, 70, &mut ChaCha8Rng::seed_from_u64(9), &p);
        let b = sample_crop_rect(50, 70, &mut ChaCha8Rng::seed_from_u64(9), &p);
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_edge_cases() {
        let img = noise(8, 8, 2);
        let zero = AugmentPolicy {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..Default::default()
        };
        assert_eq!(color_jitter(&img, &mut ChaCha8Rng::seed_from_u64(0), &zero), img);
        let bright = adjust_brightness(&solid(2, 2, [0.8; 3]), 2.0);
        assert!(bright.pixels.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grayscale_cases() {
        let white = solid(2, 2, [1.0; 3]);
        assert_eq!(to_grayscale(&white), white);
        let red = to_grayscale(&solid(2, 2, [1.0, 0.0, 0.0]));
        assert!(red.pixels.data().iter().all(|&v| v == 0.299f32));
        assert_eq!(random_grayscale(&white, &mut ChaCha8Rng::seed_from_u64(0), 0.0), white);
    }

    #[test]
    fn hue_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (0.9, 0.1, 0.1), (0.3, 0.3, 0.3), (0.0, 1.0, 0.4)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_normalized_and_symmetric() {
        for sigma in [0.1, 0.5, 1.3, 2.0] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let n = k.len();
            assert!((0..n).all(|i| k[i] == k[n - 1 - i]));
        }
    }

    #[test]
    fn blur_preserves_constant_and_mean() {
        let c = solid(9, 7, [0.3, 0.6, 0.9]);
        let out = blur(&c, 1.5);
        for (a, b) in out.pixels.data().iter().zip(c.pixels.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let img = noise(16, 12, 3);
        let mean = |s: &ImageSample| s.pixels.data().iter().map(|&v| v as f64).sum::<f64>() / s.pixels.numel() as f64;
        for sigma in [0.3, 1.0, 2.0, 6.0] {
            assert!((mean(&blur(&img, sigma)) - mean(&img)).abs() < 1e-5);
        }
    }

    #[test]
    fn flip_involution_and_box() {
        let mut img = noise(6, 5, 4);
        img.boxes.push(GroundTruthBox::new(0.2, 0.5, 0.1, 0.1));
        let f = flip_horizontal(&img);
        assert!((f.boxes[0].cx - 0.8).abs() < 1e-7);
        assert_eq!(flip_horizontal(&f).pixels, img.pixels);
        assert_eq!(horizontal_flip(&img, &mut ChaCha8Rng::seed_from_u64(0), 0.0), img);
    }

    #[test]
    fn view_pairs() {
        let img = noise(40, 48, 5);
        let p = AugmentPolicy::default();
        let a = make_view_pair(&img, 11, &p).unwrap();
        let b = make_view_pair(&img, 11, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.view_a.pixels.shape(), &[3, 64, 64]);
        let differ = (0..100).filter(|&s| {
            let v = make_view_pair(&img, s, &p).unwrap();
            v.view_a.pixels != v.view_b.pixels
        });
        assert!(differ.count() >= 99);
    }

    #[test]
    fn mosaic_forced_center_tiles() {
        let mut img = noise(16, 16, 6);
        img.boxes.push(GroundTruthBox::new(0.5, 0.5, 0.5, 0.5));
        let out = mosaic_at([&img; 4], (16, 16), 32).unwrap();
        let tile = resize_bilinear(&img.pixels, 16, 16).unwrap();
        let (o, t) = (out.pixels.data(), tile.data());
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(o[(c * 32 + y) * 32 + x], t[(c * 16 + y % 16) * 16 + x % 16]);
                }
            }
        }
        assert_eq!(out.boxes.len(), 4);
    }

    #[test]
    fn affine_identity_translation_rotation() {
        let mut img = noise(32, 32, 7);
        img.boxes.push(GroundTruthBox::new(0.5, 0.5, 0.25, 0.25));
        assert_eq!(random_affine(&img, &mut ChaCha8Rng::seed_from_u64(0), &AffineLimits::identity()), img);
        let t = affine_with(&img, &AffineParams { degrees: 0.0, scale: 1.0, dx: 3.0, dy: -2.0 });
        assert!((t.boxes[0].cx * 32.0 - 19.0).abs() < 1e-5);
        assert!((t.boxes[0].cy * 32.0 - 14.0).abs() < 1e-5);
        let r = affine_with(&img, &AffineParams { degrees: 90.0, scale: 1.0, dx: 0.0, dy: 0.0 });
        let (a, b) = (r.boxes[0], img.boxes[0]);
        assert!((a.cx - b.cx).abs() < 1e-5 && (a.w - b.w).abs() < 1e-5 && (a.h - b.h).abs() < 1e-5);
    }
}
