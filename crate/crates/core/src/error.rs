//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by facet loading, meta-embedding construction, training,
/// dataset ingestion, and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    // -- facet store ---------------------------------------------------
    #[error("embedding file {path} contains no records")]
    EmptyFile { path: String },

    #[error("duplicate token {token:?} in embedding file")]
    DuplicateToken { token: String },

    #[error("non-finite or unparseable value {value:?} for token {token:?}")]
    NonFiniteValue { token: String, value: String },

    #[error("{context}: expected {expected} values, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("facet has no rows")]
    EmptyFacet,

    #[error("at least one facet is required")]
    NoFacets,

    #[error("target dimension {target} is smaller than the current dimension {current}")]
    TargetSmallerThanSource { target: usize, current: usize },

    #[error("orthogonal iteration did not converge after {max_iters} sweeps (last subspace change {change:e})")]
    NoConvergence { max_iters: usize, change: f64 },

    // -- meta layer ----------------------------------------------------
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    // -- training ------------------------------------------------------
    #[error("example has no tokens")]
    EmptyExample,

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(&'static str),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    // -- tasks ---------------------------------------------------------
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: example has no tokens")]
    EmptyTokenList { line: usize },

    #[error("no sentences found in {path}")]
    EmptySentence { path: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // -- analysis --------------------------------------------------------
    #[error("k-means with k={k} needs at least k distinct points, got {distinct}")]
    DegenerateInput { k: usize, distinct: usize },

    #[error("token {token:?} is not in the table vocabulary")]
    UnknownToken { token: String },

    // -- configuration / pipeline ----------------------------------------
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid params file: {0}")]
    ParamsFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
