//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("token id {id} out of range for vocab {vocab} at position {pos}")]
    TokenOutOfRange { id: usize, vocab: usize, pos: usize },

    #[error("{op}: every position is padded")]
    AllPadded { op: &'static str },

    #[error("{op}: input length {len} below minimum {min}")]
    TooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("{op}: zero-norm row {row}")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("non-finite loss in component {component}")]
    NonFiniteLoss { component: &'static str },

    #[error("gradient check: function is not deterministic (two evaluations differ)")]
    NonDeterministic,

    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
