use std::io;

use thiserror::Error;

/// Failures reading or validating an `LFS1` frame archive.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic: expected \"LFS1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures reading or validating a model checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    Kind { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum LfsError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("CFL condition violated: courant number {courant:.4} exceeds {limit}")]
    Cfl { courant: f64, limit: f64 },
    #[error("rollout diverged at step {step}: latent norm trace {norms:?}")]
    Diverged { step: usize, norms: Vec<f64> },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = LfsError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> LfsError {
    LfsError::Invalid(msg.into())
}
