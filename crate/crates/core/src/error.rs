//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the pipeline. Variants are grouped by the failure
/// domain so callers (notably the CLI) can map them onto exit codes:
/// configuration, data, or backend/transport.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not match what the operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// Invalid or missing configuration (files, projection matrices, plans).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A referenced sample, file or checkpoint does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// On-disk bytes do not match their recorded checksum.
    #[error("integrity error: sample {sample_id} frame step {step}: checksum mismatch")]
    Integrity { sample_id: String, step: u32 },

    /// Dataset invariant broken (duplicate ids, empty step ranges, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Caller passed a value outside the operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An encoder backend failed; carries the backend's own detail.
    #[error("gateway error: {0}")]
    Gateway(String),

    /// The remote endpoint could not be reached or answered garbage.
    #[error("transport error: {0}")]
    Transport(String),

    /// Prompt corruption failed after exhausting retries. Carries the
    /// per-dimension transcript of rejected candidates.
    #[error("corruption error: dimensions {failed:?} failed validation; transcript: {transcript}")]
    Corruption {
        failed: Vec<String>,
        transcript: String,
    },

    /// Training loss went NaN. The last good checkpoint, if any was
    /// written, is reported so the run can be salvaged.
    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Divergence {
        step: u64,
        checkpoint: Option<PathBuf>,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class used by the CLI: 2 config, 3 data, 4 backend/transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Serde(_) => 2,
            Error::Shape { .. }
            | Error::NotFound(_)
            | Error::Integrity { .. }
            | Error::Data(_)
            | Error::Argument(_) => 3,
            Error::Io(_)
            | Error::Gateway(_)
            | Error::Transport(_)
            | Error::Corruption { .. }
            | Error::Divergence { .. } => 4,
        }
    }
}
