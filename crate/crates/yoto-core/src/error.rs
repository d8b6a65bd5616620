//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum YotoError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown head '{0}'")]
    MissingHead(String),

    #[error("head name collision: '{0}' already exists")]
    HeadCollision(String),

    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A cached forward pass does not match the parameters or config handed
    /// to backward.
    #[error("cache/params mismatch: {0}")]
    CacheMismatch(String),

    /// Vul-Vector algebra across differing base fingerprints.
    #[error("lineage error: {0}")]
    Lineage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported schema version: {0}")]
    Version(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Container file has the wrong magic or an unreadable layout.
    #[error("format error: {0}")]
    Format(String),

    /// Container file is truncated or otherwise structurally incomplete.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Container checksum does not match its contents.
    #[error("corruption detected: {0}")]
    Corruption(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, YotoError>;
