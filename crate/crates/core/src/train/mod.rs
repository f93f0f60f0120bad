//! Optimization, run configuration, checkpoints and inference.

mod adam;
mod checkpoint;
mod config;
mod predict;
mod run;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use config::{Mode, RunConfig, KEYS};
pub use predict::{convert_channels, evaluate, evaluate_clusters, predict, predict_masks, Prediction, Preprocess};
pub use run::{
    prepare_data, train, train_on, train_supervised, train_unsupervised, EpochRecord, PreparedData, TrainOutcome,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::arch::ArchError;
use crate::data::DataError;
use crate::loss::LossError;
use crate::metrics::MetricsError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter {0} received no gradient")]
    MissingGradient(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training loss became non-finite ({0})")]
    NonFiniteLoss(f32),
    #[error("{name}: label {label} does not fit a {classes}-class model")]
    ClassMismatch { name: String, label: u8, classes: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
