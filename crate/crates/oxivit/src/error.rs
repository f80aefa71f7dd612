//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value(s).
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Input value outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value encountered where finite input is required.
    #[error("numeric input error: {0}")]
    Numeric(String),

    /// Dataset balancing could not proceed.
    #[error("balance error: {0}")]
    Balance(String),

    /// Augmentation policy produced a degenerate transform.
    #[error("policy error: {0}")]
    Policy(String),

    /// On-disk dataset could not be ingested.
    #[error("ingest error: {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    /// Checkpoint bytes do not match the declared manifest.
    #[error("format error: {0}")]
    Format(String),

    /// Training aborted on a non-finite loss.
    #[error("training diverged at step {step}: loss={loss}, lr={lr}, grad_norm={grad_norm}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
