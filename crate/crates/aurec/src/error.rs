//! Crate-wide error type.
//!
//! Configuration problems are kept apart from runtime/data problems because
//! the CLI maps them to different exit codes (2 vs 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-supplied configuration (unknown field, out-of-range value,
    /// inconsistent sizes). CLI exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (manifests, landmarks, flow
    /// files, images). CLI exit code 3.
    #[error("data error: {0}")]
    Data(String),

    /// Shape mismatch between tensors at an API boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint file rejected (bad magic, version, or config hash).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss or gradient became non-finite during training.
    #[error("non-finite value in training at iteration {iter}: {what}")]
    NonFinite { iter: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
