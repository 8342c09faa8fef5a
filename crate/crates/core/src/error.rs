use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("cannot encode an empty string")]
    EmptyString,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("score matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("at least one positive is required")]
    NoPositive,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("template library is empty")]
    EmptyLibrary,
    #[error("k = {k} is outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("step {step} is beyond total steps {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("retrieval bank is stamped for epoch {bank} but training is at epoch {current}")]
    StaleBank { bank: usize, current: usize },
    #[error("invalid stage 2 flags: {0}")]
    InvalidFlags(String),
    #[error("template has a multi-component product pattern")]
    MultiInputTemplate,
    #[error("empty reactant component")]
    EmptyComponent,
    #[error("malformed template {0:?}")]
    MalformedTemplate(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("EMA decay must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("trace needs at least {needed} entries, got {got}")]
    TraceTooShort { needed: usize, got: usize },
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
