use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors across the attention kernels, model, decoding, and analytics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty row")]
    EmptyRow,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("zero attention mass")]
    ZeroAttentionMass,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("span out of bounds: [{start}, {end}) exceeds length {len}")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("sequence overflow: {requested} positions exceed max_seq_len {max}")]
    SequenceOverflow { requested: usize, max: usize },
    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error("profile not recorded")]
    ProfileNotRecorded,
    #[error("no samples")]
    NoSamples,
    #[error("label step {step} outside generated range of {len} steps")]
    LabelStepOutOfRange { step: usize, len: usize },
    #[error("no selectable logit (all negative infinity)")]
    NoSelectableLogit,
    #[error("malformed trace line {line}: {msg}")]
    MalformedTrace { line: usize, msg: String },
    #[error("malformed label line {line}: {msg}")]
    MalformedLabel { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
