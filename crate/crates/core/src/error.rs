use std::io;

use thiserror::Error;

use crate::lm::Token;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary size {0} outside supported range 8..=256")]
    InvalidVocabulary(usize),

    #[error("token id {token} is not in a vocabulary of size {size}")]
    InvalidToken { token: Token, size: usize },

    #[error("model order {0} outside supported range 1..=3")]
    InvalidOrder(usize),

    #[error("logit table with {0} entries exceeds the dense table cap")]
    TableTooLarge(usize),

    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("smoothing count must be finite and non-negative, got {0}")]
    InvalidSmoothing(f64),

    #[error("residual distribution undefined: p and q coincide (mass {0:e})")]
    DegenerateResidual(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("white-box loss {0} requires per-position target distributions")]
    WhiteBoxDataRequired(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("record does not parse under the chat template: {0}")]
    Template(String),

    #[error("synthesis yield too low: {survived} of {requested} records survived filtering")]
    YieldTooLow { survived: usize, requested: usize },

    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("corrupt model header: {0}")]
    Header(String),

    #[error("model file truncated: expected {expected} bytes of logits, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("malformed data file at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
