//! Late fusion by weighted probabilities and feature fusion by a small MLP.

mod adam;
mod ensemble;
mod mlp;
mod train;

pub use adam::{adam_step, AdamState};
pub use ensemble::{ensemble_probs, macc_of, search_weights, search_weights_grid, EnsembleWeights, GRID_STEPS};
pub use mlp::{
    load_checkpoint, mlp_backward, mlp_forward, mlp_forward_batch, predict_fusion, predict_fusion_batch, read_checkpoint,
    save_checkpoint, softmax, softmax_ce_loss, write_checkpoint, ForwardCache, Layer, MlpParams, FUSION_DIMS,
};
pub use train::{train_fusion, write_train_log, EpochLog, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::embed::StoreError;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training set is empty")]
    EmptyTraining,
    #[error("non-finite input value at index {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FusionError {
    pub fn name(&self) -> &'static str {
        match self {
            FusionError::EmptyValidation => "EmptyValidation",
            FusionError::EmptyTraining => "EmptyTraining",
            FusionError::NonFiniteInput(_) => "NonFiniteInput",
            FusionError::ShapeMismatch(_) => "ShapeMismatch",
            FusionError::InvalidConfig(_) => "InvalidConfig",
            FusionError::Store(e) => e.name(),
            FusionError::Checkpoint(_) => "BadCheckpoint",
            FusionError::Io(_) => "IoError",
        }
    }
}
