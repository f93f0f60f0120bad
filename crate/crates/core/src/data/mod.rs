//! Images, trimaps, preprocessing, augmentation and dataset handling.

mod dataset;
mod io;
mod transform;

pub use dataset::{
    augment_samples, list_names, load_dataset, save_pair, split, Dataset, Sample, Split, SplitSpec,
    IMAGES_DIR, TRIMAPS_DIR,
};
pub use io::{load_image, load_trimap, save_colorized, save_image, save_labels, save_trimap};
pub use transform::{
    apply_transform, augment, resize_bilinear, resize_nearest, sigmoid_correction, AugmentParams, Transform,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const BLADE: u8 = 1;
pub const VEINS: u8 = 2;
pub const CLASS_NAMES: [&str; 3] = ["background", "blade", "veins"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt or unreadable PNG: {message}")]
    Png { path: PathBuf, message: String },
    #[error("{path}: unsupported PNG format: {what}")]
    Unsupported { path: PathBuf, what: String },
    #[error("{path}: trimap value {value} at (x={x}, y={y}) is not one of 0, 1, 2")]
    TrimapValue { path: PathBuf, value: u8, x: usize, y: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("infeasible split: {train}/{valid}/{test} requested from {available} sources")]
    InfeasibleSplit { train: usize, valid: usize, test: usize, available: usize },
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("image {name} has no matching trimap in {dir}")]
    MissingTrimap { name: String, dir: PathBuf },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Planar image with values in `[0, 1]`; `pixels[c][y][x]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DataError::Invalid(format!("image extent {height}x{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::Invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::Invalid(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Applies `f` to every value; results are clamped into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel class labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(DataError::Invalid(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixel count per label `0..num_classes`; larger labels are ignored.
    pub fn counts(&self, num_classes: usize) -> Vec<u64> {
        let mut c = vec![0u64; num_classes];
        for &l in &self.labels {
            if let Some(slot) = c.get_mut(l as usize) {
                *slot += 1;
            }
        }
        c
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn map_labels(&self, f: impl Fn(u8) -> u8) -> Self {
        Self { labels: self.labels.iter().map(|&l| f(l)).collect(), ..self.clone() }
    }
}

/// Stacks equally sized images into an `[n, c, h, w]` tensor.
pub fn images_to_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(DataError::Invalid(format!(
                "batch images differ in shape: {}x{}x{} vs {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))
}
