//! Supervised contrastive training of a linear projection.
//!
//! Mentions in a batch that are positives of each other are pulled together
//! in cosine space, all other batch members act as negatives. The projection
//! is the only trainable parameter.

mod loss;
mod model;
mod sampler;
mod train;

use thiserror::Error;

pub use loss::{loss_and_gradient, sup_con_loss, Batch};
pub use model::{project_store, read_model, write_model, ProjectionModel};
pub use sampler::{sample_batch_groups, sample_batch_pairs, GroupSampler, PairSampler};
pub use train::{lr_at_step, train_projection, EpochLog, TrainConfig, TrainOutcome, TrainingData};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("batch needs at least 2 elements, got {0}")]
    BatchTooSmall(usize),
    #[error("no element in the batch has a positive")]
    NoPositives,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("temperature must be positive")]
    BadTemperature,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(
        "projected vector of record {record} has zero norm; re-seed or lower the learning rate"
    )]
    ZeroNorm { record: u32 },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("no training data")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Format(#[from] crate::binfmt::FormatError),
}

impl From<std::io::Error> for ContrastiveError {
    fn from(e: std::io::Error) -> Self {
        ContrastiveError::Format(crate::binfmt::FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;
