use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: expected extent {expected}, found {found}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context}: shape {lhs:?} is incompatible with {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{what} index {index} out of range (length {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("malformed tensor file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("tensor payload length mismatch: header declares {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mean over zero valid positions")]
    UndefinedMean,

    #[error("unknown {kind} `{value}`")]
    UnknownVariant { kind: &'static str, value: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
