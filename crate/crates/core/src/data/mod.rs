//! Synthetic scenes, augmentation and on-disk formats.

pub mod augment;
pub mod dataset;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["wrench", "bottle", "knife", "pistol"];

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for {width}×{height}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// `[H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [self.height, self.width],
            self.pixels.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("pixel count matches extent")
    }
}

/// An object annotation; `bbox` is `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

impl DatasetRecord {
    /// Boxes as normalised `(cx, cy, w, h)` relative to `(width, height)`.
    pub fn normalised_boxes(&self, width: usize, height: usize) -> Vec<[f64; 4]> {
        let (w, h) = (width as f64, height as f64);
        self.annotations
            .iter()
            .map(|a| {
                let [x1, y1, x2, y2] = a.bbox;
                [(x1 + x2) / 2.0 / w, (y1 + y2) / 2.0 / h, (x2 - x1) / w, (y2 - y1) / h]
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }
}

/// An image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub record: DatasetRecord,
}
