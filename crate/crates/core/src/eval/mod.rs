//! Evaluation protocols for concept embeddings: per-class linear
//! classification and a mention-set classifier scored by macro F1, and
//! k-means clustering scored by purity.

mod cluster;
mod dataset;
mod linear;
mod mention;
mod metrics;

use thiserror::Error;

use crate::store::ConceptId;

pub use cluster::{
    kmeans_from_centers, kmeans_pp_init, kmeans_purity, purity, restart_seed, ClusterConfig,
    ClusterReport, KMeansRun,
};
pub use dataset::{
    read_dataset, read_dataset_file, split_and_negatives, DatasetRow, Item, LabeledDataset, Split,
    SplitRatios,
};
pub use linear::{
    evaluate_linear, fit_svm, primal_objective, train_linear, LinearClassifier, LinearEvalConfig,
    LinearEvalOutcome, SvmOptions, DEFAULT_C_GRID,
};
pub use mention::{
    evaluate_mention_classifier, train_mention_classifier, MentionClassifierConfig,
    MentionEvalOutcome, MentionSetClassifier,
};
pub use metrics::{binary_f1, macro_f1, ClassMetrics, MetricsReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("training data has a single label")]
    SingleLabel,
    #[error("split has no items")]
    EmptySplit,
    #[error("predictions cover {found} items, split has {expected}")]
    PredictionCount { expected: usize, found: usize },
    #[error("k must be between 1 and the number of points ({points}), got {k}")]
    BadK { k: usize, points: usize },
    #[error("no concept has an embedding")]
    EmptyTable,
    #[error("concept {} has no mentions", .0 .0)]
    NoMentions(ConceptId),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("training diverged: non-finite loss")]
    Diverged,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
