//! Box types shared by the augmentations, the detector and the metrics.
//!
//! Ground truth is stored normalized in center format; everything that
//! touches pixels (decoding, NMS, matching) uses [`Rect`] corner format.

use crate::error::{Error, Result};

/// Annotated box, normalized to `[0, 1]` in center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub class_id: u32,
}

impl GroundTruthBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h, class_id: 0 }
    }

    /// Corner box in pixels for an image of `width × height`.
    pub fn to_rect(&self, width: usize, height: usize) -> Rect {
        let (w, h) = (width as f32, height as f32);
        Rect {
            x_min: (self.cx - self.w / 2.0) * w,
            y_min: (self.cy - self.h / 2.0) * h,
            x_max: (self.cx + self.w / 2.0) * w,
            y_max: (self.cy + self.h / 2.0) * h,
        }
    }

    pub fn from_rect(r: &Rect, width: usize, height: usize) -> Self {
        let (w, h) = (width as f32, height as f32);
        Self::new(
            (r.x_min + r.x_max) / 2.0 / w,
            (r.y_min + r.y_max) / 2.0 / h,
            (r.x_max - r.x_min) / w,
            (r.y_max - r.y_min) / h,
        )
    }
}

/// Axis-aligned corner box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl Rect {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        let w = (self.x_max as f64 - self.x_min as f64).max(0.0);
        let h = (self.y_max as f64 - self.y_min as f64).max(0.0);
        w * h
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn clip(&self, width: f32, height: f32) -> Rect {
        Rect {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub(crate) fn intersection(&self, other: &Rect) -> f64 {
        let w = (self.x_max.min(other.x_max) as f64 - self.x_min.max(other.x_min) as f64).max(0.0);
        let h = (self.y_max.min(other.y_max) as f64 - self.y_min.max(other.y_min) as f64).max(0.0);
        w * h
    }
}

/// Scored prediction in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Rect,
    pub score: f32,
}

impl Detection {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32, score: f32) -> Self {
        Self {
            bbox: Rect::new(x_min, y_min, x_max, y_max),
            score,
        }
    }
}

/// Intersection over union. Zero-area boxes are rejected.
pub fn iou(a: &Rect, b: &Rect) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::invalid(format!("iou of zero-area box: {a:?} vs {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

/// IoU that treats an empty union as zero overlap.
pub(crate) fn iou_unchecked(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}
