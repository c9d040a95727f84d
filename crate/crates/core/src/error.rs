use thiserror::Error;

/// Engine-level error for all core operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("index out of range: {msg}")]
    IndexOutOfRange { msg: String },

    #[error("prompt exceeds layout: {words} words, capacity {capacity}")]
    PromptExceedsLayout { words: usize, capacity: usize },

    #[error("span length mismatch: source {src} vs target {tgt}")]
    SpanLengthMismatch { src: usize, tgt: usize },

    #[error("padding overflow: need {need}, have {have}")]
    PaddingOverflow { need: usize, have: usize },

    #[error("pooled slot unavailable: EOS is masked")]
    PooledSlotUnavailable,

    #[error("invalid object slot {slot}: {reason}")]
    InvalidObjectSlot { slot: usize, reason: String },

    #[error("validation error in `{field}`: {msg}")]
    Validation { field: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
