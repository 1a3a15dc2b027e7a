use std::io;

use thiserror::Error;

/// Errors produced anywhere in the caching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in layer {layer}: {what}")]
    NonFinite { layer: usize, what: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("worker {men_id} failed in round {round}: {reason}")]
    WorkerFailed {
        men_id: usize,
        round: u64,
        reason: String,
    },

    #[error("{method}: {source}")]
    InMethod {
        method: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this error: 2 for configuration problems, 3
    /// for divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Diverged { .. } => 3,
            Error::InMethod { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub fn in_method(self, method: &'static str) -> Self {
        Error::InMethod {
            method,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
