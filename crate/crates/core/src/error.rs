use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("poisoned optimizer step: non-finite gradient in `{param}`")]
    PoisonedStep { param: String },

    #[error("input of {len} tokens exceeds max_position {max}")]
    InputLength { len: usize, max: usize },

    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),

    #[error("unsupported layer map: {student} student layers onto {teacher} teacher layers")]
    UnsupportedMap { student: usize, teacher: usize },

    #[error("loss diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("non-finite loss input: {0}")]
    NonFinite(String),

    #[error("degenerate pairs: differences have zero variance")]
    DegeneratePairs,

    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint truncated: expected {expected} bytes of tensor data, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
