use crate::arch::Model;
use crate::data::{images_to_batch, resize_bilinear, resize_nearest, sigmoid_correction, Image, LabelMask, Sample};
use crate::metrics::{match_table, ClusterMapping, ConfusionMatrix, ContingencyTable};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::{Result, TrainError};

/// Maps raw images onto the network's input: channel conversion, bilinear
/// resize and optional sigmoid contrast correction, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(gain, cutoff)` when contrast correction is enabled.
    pub sigmoid: Option<(f32, f32)>,
}

impl Preprocess {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let (channels, height, width) = cfg.spec.input_shape;
        Self {
            channels,
            height,
            width,
            sigmoid: cfg.sigmoid_correction.then_some((cfg.sigmoid_gain, cfg.sigmoid_cutoff)),
        }
    }

    pub fn image(&self, img: &Image) -> Result<Image> {
        let img = convert_channels(img, self.channels)?;
        let img = resize_bilinear(&img, self.height, self.width)?;
        Ok(match self.sigmoid {
            Some((gain, cutoff)) => sigmoid_correction(&img, gain, cutoff)?,
            None => img,
        })
    }

    pub fn mask(&self, mask: &LabelMask) -> Result<LabelMask> {
        Ok(resize_nearest(mask, self.height, self.width)?)
    }

    pub fn sample(&self, s: &Sample) -> Result<Sample> {
        Ok(Sample {
            name: s.name.clone(),
            source: s.source,
            image: self.image(&s.image)?,
            mask: s.mask.as_ref().map(|m| self.mask(m)).transpose()?,
        })
    }
}

/// Gray images are replicated to RGB; RGB images reduce to their channel mean.
pub fn convert_channels(img: &Image, channels: usize) -> Result<Image> {
    if img.channels() == channels {
        return Ok(img.clone());
    }
    let plane = img.height() * img.width();
    let pixels = match (img.channels(), channels) {
        (1, 3) => img.pixels().repeat(3),
        (3, 1) => (0..plane).map(|p| (0..3).map(|c| img.pixels()[c * plane + p]).sum::<f32>() / 3.0).collect(),
        (a, b) => return Err(TrainError::Shape(format!("cannot convert {a}-channel image to {b} channels"))),
    };
    Ok(Image::new(img.height(), img.width(), channels, pixels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: LabelMask,
    /// Softmax probabilities `[classes, h, w]` when requested.
    pub probs: Option<Tensor>,
}

/// First index of the largest logit for every pixel of every image.
fn argmax_masks(logits: &Tensor) -> Result<Vec<LabelMask>> {
    let [n, c, h, w] = logits.shape()[..] else {
        return Err(TrainError::Shape(format!("logits must be rank 4, got {:?}", logits.shape())));
    };
    let plane = h * w;
    let x = logits.data();
    (0..n)
        .map(|b| {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if x[(b * c + k) * plane + p] > x[(b * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Ok(LabelMask::new(h, w, labels)?)
        })
        .collect()
}

fn softmax_planes(logits: &[f32], c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * plane];
    for p in 0..plane {
        let m = (0..c).map(|k| logits[k * plane + p]).fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = (0..c).map(|k| (logits[k * plane + p] - m).exp()).collect();
        let s: f32 = e.iter().sum();
        for k in 0..c {
            out[k * plane + p] = e[k] / s;
        }
    }
    out
}

/// Labels for already preprocessed images, evaluated in batches.
pub fn predict_masks(model: &Model, images: &[&Image], batch_size: usize) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let logits = model.infer(images_to_batch(chunk)?)?;
        out.extend(argmax_masks(&logits)?);
    }
    Ok(out)
}

/// Segments one raw image at the network's input resolution.
pub fn predict(model: &Model, pre: &Preprocess, image: &Image, with_probs: bool) -> Result<Prediction> {
    let img = pre.image(image)?;
    let (c, h, w) = model.input_shape();
    if (img.channels(), img.height(), img.width()) != (c, h, w) {
        return Err(TrainError::Shape(format!(
            "preprocessed image is {}x{}x{}, model expects {c}x{h}x{w}",
            img.channels(),
            img.height(),
            img.width()
        )));
    }
    let logits = model.infer(images_to_batch(&[&img])?)?;
    let mask = argmax_masks(&logits)?.remove(0);
    let probs = if with_probs {
        let k = logits.shape()[1];
        Some(Tensor::new(vec![k, h, w], softmax_planes(logits.data(), k, h * w))?)
    } else {
        None
    };
    Ok(Prediction { mask, probs })
}

fn masks_of(samples: &[Sample]) -> Result<Vec<&LabelMask>> {
    samples
        .iter()
        .map(|s| s.mask.as_ref().ok_or_else(|| TrainError::Invalid(format!("sample {} has no trimap", s.name))))
        .collect()
}

/// Confusion matrix of predictions against trimaps over preprocessed samples.
pub fn evaluate(model: &Model, samples: &[Sample], num_classes: usize, batch_size: usize) -> Result<ConfusionMatrix> {
    let gts = masks_of(samples)?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images, batch_size)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(cm)
}

/// Matches predicted clusters to classes over the whole sample set, then
/// scores the mapped predictions.
pub fn evaluate_clusters(
    model: &Model,
    samples: &[Sample],
    num_classes: usize,
    batch_size: usize,
) -> Result<(ClusterMapping, ConfusionMatrix)> {
    let gts = masks_of(samples)?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images, batch_size)?;
    let mut table = ContingencyTable::new(model.num_classes(), num_classes);
    for (p, g) in preds.iter().zip(&gts) {
        table.accumulate(p, g)?;
    }
    let mapping = match_table(&table)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(&mapping.apply(p), g)?;
    }
    Ok((mapping, cm))
}
