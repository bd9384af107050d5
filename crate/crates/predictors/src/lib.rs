//! Dose predictors: a pix2pix-style conditional GAN, the same U-net trained
//! with L1 alone, and a random forest on hand-built voxel features.
//!
//! Neural models work on axial slices rendered at `S x S` pixels. Doses are
//! scaled to `[-1, 1]` by `d / 40 - 1` (so 0 to 80 Gy) to match the tanh
//! output, and predictions are averaged back onto the voxel grid.

mod data;
mod discriminator;
mod forest;
mod train;
mod unet;

pub use data::{denormalize, extract_slices, normalize, stack_batch, SlicePair, D_MAX};
pub use discriminator::Discriminator;
pub use forest::{
    extract_rf_features, predict_volume_rf, rf_feature_matrix, rf_predict, rf_train, ForestConfig, Node, RandomForest,
    RegressionTree, RF_FEATURES, RF_FEATURE_NAMES,
};
pub use train::{
    cnn_train, gan_train, mean_l1, predict_volume, EpochLog, StepLog, TrainConfig, TrainLog, TrainOutcome,
};
pub use unet::{load_generator, save_generator, UNet, UNetConfig};

use kbp_core::dosecalc::DoseCalcError;
use kbp_core::phantom::PhantomError;
use kbp_tensornet::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Dose(#[from] DoseCalcError),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("empty training set")]
    EmptyDataset,
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PredictorError>;
