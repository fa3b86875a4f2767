use std::path::PathBuf;

use lsn_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("corrupt dataset {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("{path}: not a checkpoint (bad magic)")]
    NotACheckpoint { path: PathBuf },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: checkpoint format version {found} is newer than supported version {supported}")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("parameter sets differ: {0}")]
    NameMismatch(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("stage {stage} out of range 1..={stages}")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("stage {0} has no loss head of the requested kind")]
    MissingHead(usize),

    #[error("training failed at step {step}: {source} (per-level losses: {levels})")]
    Training {
        step: u64,
        levels: String,
        #[source]
        source: Box<Error>,
    },

    #[error("target network received a gradient (max |g| = {0})")]
    TargetGradient(f64),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
