use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{num_classes} classes cannot be split evenly into {num_tasks} tasks")]
    IndivisibleClasses { num_classes: usize, num_tasks: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt template {template} needs a class name but only index {index} is known")]
    MissingClassName { template: &'static str, index: usize },

    #[error("text embedder unavailable: {0}")]
    EmbedderUnavailable(String),

    #[error("label {0} is not present in the embedding pool")]
    UnknownLabel(usize),

    #[error("pairwise distances need at least two classes")]
    SingleClass,

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("cannot shrink classifier head from {current} to {requested} classes")]
    ShrinkingHead { current: usize, requested: usize },

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("adaptive scale factors are undefined without previous classes")]
    InvalidTaskOne,

    #[error("batch-norm layer mismatch: {0}")]
    LayerMismatch(String),

    #[error("label {label} does not fit a head of width {width}")]
    HeadTooNarrow { label: usize, width: usize },

    #[error("no anchor embedding for class {0}")]
    MissingAnchor(usize),

    #[error("both real and synthetic loaders are empty")]
    BothEmpty,

    #[error("no previous classes to sample pseudo labels from")]
    NoPreviousClasses,

    #[error("non-finite generator loss in round {round}")]
    NonFiniteLoss { round: usize },

    #[error("synthetic memory is empty")]
    EmptyMemory,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("aggregation weights sum to zero")]
    AllZeroWeights,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("forgetting is undefined for a single task")]
    SingleTask,

    #[error("client shard handle was revoked after its task completed")]
    Revoked,

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("malformed archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("task {task}, round {round}: {source}")]
    InRound {
        task: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot load dataset {path}: {reason}")]
    DatasetUnavailable { path: String, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn in_task(self, task: usize) -> Self {
        match self {
            e @ (Error::InTask { .. } | Error::InRound { .. }) => e,
            e => Error::InTask {
                task,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn in_round(self, task: usize, round: usize) -> Self {
        match self {
            e @ Error::InRound { .. } => e,
            e => Error::InRound {
                task,
                round,
                source: Box::new(e),
            },
        }
    }
}
