use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The CLI maps variants onto its documented exit
/// codes, so the grouping here is part of the public contract.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation (matvec, batch assembly, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Corpus ingestion or encoding failure (missing file, bad UTF-8,
    /// empty text, character outside the vocabulary).
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Numerical failure during HMM inference (e.g. a symbol with zero
    /// emission probability in every state).
    #[error("inference error: {0}")]
    Inference(String),

    /// Failure inside a training loop (non-finite gradients and the like).
    #[error("training error: {0}")]
    Training(String),

    /// Trajectory comparison is undefined for the given inputs.
    #[error("comparison error: {0}")]
    Comparison(String),

    /// A model file could not be read, parsed, or validated.
    #[error("model file error: {0}")]
    ModelFile(String),

    /// A model was paired with a vocabulary manifest it was not trained on.
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    /// Two models (or trajectories) disagree on a dimension that must match.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Every cell of a sweep failed.
    #[error("sweep failed: {0}")]
    SweepFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
