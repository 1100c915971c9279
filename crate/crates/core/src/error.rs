//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Every failure the simulator can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate gradient at index {index} (norm <= 1e-12)")]
    DegenerateGradient { index: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("need at least {required} gradients, got {found}")]
    TooFewGradients { required: usize, found: usize },

    #[error("invalid layer shapes: {0}")]
    InvalidShapes(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },

    #[error("cannot split {examples} examples across {clients} clients")]
    TooManyClients { clients: usize, examples: usize },

    #[error("non-IID partitioning needs at least {classes} clients, got {clients}")]
    TooFewClients { clients: usize, classes: usize },

    #[error("non-IID bias must satisfy 0 < beta <= 1, got {0}")]
    InvalidBeta(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("weights do not match gradients: {0}")]
    WeightMismatch(String),

    #[error("trim parameter b={trim} requires more than {} gradients, got {count}", 2 * trim)]
    TrimTooLarge { trim: usize, count: usize },

    #[error("invalid multi-krum parameters: {0}")]
    InvalidKrumParams(String),

    #[error("top-k requires 1 <= k <= {dim}, got {k}")]
    InvalidK { k: usize, dim: usize },

    #[error("empty validation set")]
    EmptyValidationSet,

    #[error("label flipping needs at least two classes")]
    SingleClassDataset,

    #[error("need at least two reference gradients, got {0}")]
    TooFewReferences(usize),

    #[error("mask budget floor(gamma * |D_mask|) is zero")]
    EmptyMaskBudget,

    #[error("participation fraction must be in (0, 1], got {0}")]
    InvalidC(f64),

    #[error("empty history")]
    EmptyHistory,

    #[error("empty set")]
    EmptySet,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
