use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("iterative routine did not converge within {iterations} sweeps")]
    NoConvergence { iterations: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("triangular factor has a zero diagonal entry at index {0}")]
    SingularTriangular(usize),

    #[error("columns are not orthonormal: defect {defect:e} exceeds {tolerance:e}")]
    NotOrthonormal { defect: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requested for a value that was never recorded on this tape")]
    BackwardWithoutForward,

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("shared token memory is frozen")]
    FrozenMemory,

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus not found: {}", .0.display())]
    CorpusNotFound(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint holds only the token interface; a full model is required")]
    HeadOnlyCheckpoint,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
