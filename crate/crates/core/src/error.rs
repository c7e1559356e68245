use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("probe sample has no supervised response positions")]
    EmptyMask,

    #[error("invalid probe sample: {0}")]
    InvalidSample(String),

    #[error("probe set is empty")]
    EmptyProbeSet,

    #[error("module {0} is missing")]
    MissingModule(String),

    #[error("activation cache does not match parameters: {0}")]
    CacheMismatch(String),

    #[error("step {step} outside schedule range 0..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
