use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("edge references segment {id} but the network has {num_segments} segments")]
    DanglingSegment { id: u64, num_segments: usize },

    #[error("segment ids are not contiguous: expected {expected}, found {found}")]
    NonContiguousIds { expected: usize, found: u64 },

    #[error("trajectory {trajectory:?} references unknown segment {id}")]
    UnknownSegment { trajectory: String, id: u64 },

    #[error("trajectory {trajectory:?} has {segments} segments but {timestamps} timestamps")]
    TimestampMismatch {
        trajectory: String,
        segments: usize,
        timestamps: usize,
    },

    #[error("trajectory {0:?}: {1}")]
    InvalidTrajectory(String, String),

    #[error("duplicate trajectory id {0:?}")]
    DuplicateTrajectory(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory contrast needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty trajectory corpus")]
    EmptyCorpus,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
