//! Training objectives: class-weighted cross-entropy over trimap labels and
//! the fuzzy c-means clustering objective over softmax memberships.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::LabelMask;
use crate::nn::log_softmax_channels;
use crate::tensor::{Graph, Reduce, Tensor, TensorError, Var};

/// Added to each centroid's membership mass so empty clusters stay finite.
pub const CENTROID_EPS: f32 = 1e-12;
/// Largest tolerated deviation of a membership row sum from 1.
pub const MEMBERSHIP_TOL: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} at pixel {index} is outside 0..{classes}")]
    LabelOutOfRange { label: u8, index: usize, classes: usize },
    #[error("class {0} never occurs in the training masks; cannot weight it")]
    AbsentClass(usize),
    #[error("membership row at pixel {index} sums to {sum}, not 1")]
    Membership { index: usize, sum: f32 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Per-class multipliers on the cross-entropy terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f32>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f32>) -> Result<Self> {
        if weights.is_empty() {
            return Err(LossError::Invalid("class weights must not be empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(LossError::Invalid(format!("class weights must be positive and finite, got {w}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self { weights: vec![1.0; num_classes] }
    }

    /// Inverse class frequency, rescaled to mean 1.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(LossError::AbsentClass(k));
        }
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let raw: Vec<f64> = counts.iter().map(|&c| total / c as f64).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self::new(raw.iter().map(|w| (w / mean) as f32).collect())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights_from_dataset<'a>(
    masks: impl IntoIterator<Item = &'a LabelMask>,
    num_classes: usize,
) -> Result<ClassWeights> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for (index, &l) in m.labels().iter().enumerate() {
            let slot = counts
                .get_mut(l as usize)
                .ok_or(LossError::LabelOutOfRange { label: l, index, classes: num_classes })?;
            *slot += 1;
        }
    }
    ClassWeights::from_counts(&counts)
}

/// Mean over all pixels of `-w[t] * log_softmax(logits)[t]`.
pub fn weighted_cross_entropy(g: &mut Graph, logits: Var, targets: &[&LabelMask], weights: &ClassWeights) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(TensorError::Rank { op: "weighted_cross_entropy", expected: 4, shape }.into());
    };
    if targets.len() != n || targets.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(LossError::Invalid(format!("targets do not match logits of shape {shape:?}")));
    }
    if weights.len() != c {
        return Err(LossError::Invalid(format!("{} class weights for {c} logit channels", weights.len())));
    }
    let plane = h * w;
    let scale = 1.0 / (n * plane) as f32;
    let mut select = vec![0.0f32; n * c * plane];
    for (b, m) in targets.iter().enumerate() {
        for (p, &l) in m.labels().iter().enumerate() {
            if l as usize >= c {
                return Err(LossError::LabelOutOfRange { label: l, index: b * plane + p, classes: c });
            }
            select[(b * c + l as usize) * plane + p] = -weights.as_slice()[l as usize] * scale;
        }
    }
    let ls = log_softmax_channels(g, logits)?;
    let sel = g.constant(Tensor::new(shape, select)?);
    let picked = g.mul(ls, sel)?;
    Ok(g.sum_all(picked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidGrad {
    /// Centroids are constants of the backward pass.
    Detached,
    /// Gradients also flow through the centroid computation.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Rgb,
    /// Channel mean.
    Intensity,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $kw:literal),+) => {
        impl FromStr for $ty {
            type Err = LossError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($variant),)+
                    other => Err(LossError::Invalid(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($variant => $kw,)+
                })
            }
        }
    };
}

keyword_enum!(CentroidGrad, "centroid gradient policy", CentroidGrad::Detached => "detached", CentroidGrad::Flow => "flow");
keyword_enum!(Feature, "fcm feature", Feature::Rgb => "rgb", Feature::Intensity => "intensity");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcmConfig {
    pub clusters: usize,
    pub q: f32,
    pub centroid_grad: CentroidGrad,
    pub feature: Feature,
}

impl Default for FcmConfig {
    fn default() -> Self {
        Self { clusters: 3, q: 2.0, centroid_grad: CentroidGrad::Detached, feature: Feature::Rgb }
    }
}

impl FcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(LossError::Invalid(format!("fcm needs at least 2 clusters, got {}", self.clusters)));
        }
        if !(self.q >= 1.0 && self.q.is_finite()) {
            return Err(LossError::Invalid(format!("fuzzifier q must be at least 1, got {}", self.q)));
        }
        Ok(())
    }
}

/// Per-pixel features for the clustering objective from an `[n, c, h, w]`
/// image batch.
pub fn fcm_features(images: &Tensor, feature: Feature) -> Result<Tensor> {
    let shape = images.shape().to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(TensorError::Rank { op: "fcm_features", expected: 4, shape }.into());
    };
    match feature {
        Feature::Rgb => Ok(images.detached()),
        Feature::Intensity => {
            let plane = h * w;
            let x = images.data();
            let mut out = vec![0.0f32; n * plane];
            for b in 0..n {
                for p in 0..plane {
                    let s: f32 = (0..c).map(|k| x[(b * c + k) * plane + p]).sum();
                    out[b * plane + p] = s / c as f32;
                }
            }
            Ok(Tensor::new(vec![n, 1, h, w], out)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Normalization {
    Sum,
    PixelMean,
}

/// Clustering objective with per-image centroids, averaged over the pixels
/// of each image and then over the batch.
pub fn fcm_loss(g: &mut Graph, memberships: Var, features: &Tensor, cfg: &FcmConfig) -> Result<Var> {
    fcm(g, memberships, features, cfg, Normalization::PixelMean)
}

/// Unnormalized objective: the plain sum over every pixel and cluster.
pub fn fcm_loss_sum(g: &mut Graph, memberships: Var, features: &Tensor, cfg: &FcmConfig) -> Result<Var> {
    fcm(g, memberships, features, cfg, Normalization::Sum)
}

fn fcm(g: &mut Graph, u: Var, features: &Tensor, cfg: &FcmConfig, norm: Normalization) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(u).to_vec();
    let [n, k, h, w] = shape[..] else {
        return Err(TensorError::Rank { op: "fcm_loss", expected: 4, shape }.into());
    };
    if k != cfg.clusters {
        return Err(LossError::Invalid(format!("{k} membership channels for {} clusters", cfg.clusters)));
    }
    let fshape = features.shape();
    if fshape.len() != 4 || fshape[0] != n || fshape[2] != h || fshape[3] != w {
        return Err(LossError::Invalid(format!("features {fshape:?} do not match memberships {shape:?}")));
    }
    if let Some(v) = features.data().iter().find(|v| !v.is_finite()) {
        return Err(LossError::Invalid(format!("non-finite feature value {v}")));
    }
    let f = fshape[1];
    let plane = h * w;
    let uv = g.value(u).data();
    for b in 0..n {
        for p in 0..plane {
            let sum: f32 = (0..k).map(|c| uv[(b * k + c) * plane + p]).sum();
            if (sum - 1.0).abs() > MEMBERSHIP_TOL {
                return Err(LossError::Membership { index: b * plane + p, sum });
            }
        }
    }

    let uq = g.powf(u, cfg.q);
    let uq = g.reshape(uq, vec![n, k, 1, plane])?;
    let y = g.constant(features.detached().reshape(vec![n, 1, f, plane])?);
    let weighted = g.mul(uq, y)?;
    let num = g.reduce(Reduce::Sum, weighted, &[3], true)?;
    let mass = g.reduce(Reduce::Sum, uq, &[3], true)?;
    let mass = g.add_scalar(mass, CENTROID_EPS);
    let mut centroids = g.div(num, mass)?;
    if cfg.centroid_grad == CentroidGrad::Detached {
        centroids = g.detach(centroids);
    }
    let diff = g.sub(y, centroids)?;
    let sq = g.mul(diff, diff)?;
    let dist = g.reduce(Reduce::Sum, sq, &[2], true)?;
    let terms = g.mul(uq, dist)?;
    Ok(match norm {
        Normalization::Sum => g.sum_all(terms),
        Normalization::PixelMean => {
            let total = g.sum_all(terms);
            g.scale(total, 1.0 / (n * plane) as f32)
        }
    })
}
