//! Geometric and photometric augmentation with consistent box transforms.
//!
//! `Rotate90` turns the image a quarter turn counter-clockwise as seen on
//! screen: a point `(x, y)` of a `W`-wide image moves to `(y, W − x)`, and the
//! output is `H` wide and `W` tall.

use serde::{Deserialize, Serialize};

use super::{Annotation, GrayImage};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    HFlip,
    Rotate90,
    GaussianBlur {
        sigma: f64,
    },
    /// Multiplies every pixel by `factor`, then clamps to `[0, 1]`.
    Brightness {
        factor: f64,
    },
}

pub const BLUR_SIGMAS: [f64; 2] = [0.5, 1.0];
pub const BRIGHTNESS_RANGE: f64 = 0.2;

impl AugmentOp {
    /// One of the four operations with random parameters.
    pub fn random(rng: &mut SeededRng) -> Self {
        match rng.below(4) {
            0 => Self::HFlip,
            1 => Self::Rotate90,
            2 => Self::GaussianBlur {
                sigma: BLUR_SIGMAS[rng.below(2)],
            },
            _ => Self::Brightness {
                factor: 1.0 + rng.range(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE),
            },
        }
    }
}

pub fn hflip_box(b: [f64; 4], width: usize) -> [f64; 4] {
    let w = width as f64;
    [w - b[2], b[1], w - b[0], b[3]]
}

pub fn rotate90_box(b: [f64; 4], width: usize) -> [f64; 4] {
    let w = width as f64;
    [b[1], w - b[2], b[3], w - b[0]]
}

fn hflip(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(img.width - 1 - x, y, img.get(x, y));
        }
    }
    out
}

fn rotate90(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(y, img.width - 1 - x, img.get(x, y));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = vec![0.0f64; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x + i as i64 - r).clamp(0, w - 1);
                acc += kv * img.get(xx as usize, y as usize) as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y + i as i64 - r).clamp(0, h - 1);
                acc += kv * tmp[(yy * w + x) as usize];
            }
            out.set(x as usize, y as usize, acc as f32);
        }
    }
    out
}

/// Applies `op` to an image and its annotations.
pub fn augment(img: &GrayImage, anns: &[Annotation], op: AugmentOp) -> (GrayImage, Vec<Annotation>) {
    let map_boxes = |f: &dyn Fn([f64; 4]) -> [f64; 4]| -> Vec<Annotation> {
        anns.iter()
            .map(|a| Annotation {
                class_id: a.class_id,
                bbox: f(a.bbox),
            })
            .collect()
    };
    match op {
        AugmentOp::HFlip => (hflip(img), map_boxes(&|b| hflip_box(b, img.width))),
        AugmentOp::Rotate90 => (rotate90(img), map_boxes(&|b| rotate90_box(b, img.width))),
        AugmentOp::GaussianBlur { sigma } => (gaussian_blur(img, sigma), anns.to_vec()),
        AugmentOp::Brightness { factor } => {
            let mut out = img.clone();
            for p in &mut out.pixels {
                *p = (*p as f64 * factor).clamp(0.0, 1.0) as f32;
            }
            (out, anns.to_vec())
        }
    }
}
