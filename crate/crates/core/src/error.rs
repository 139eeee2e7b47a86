use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the sampler library and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the schedule domain [0, 1]")]
    Domain { t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at iteration {iteration}: loss {loss} (initial {initial})")]
    Divergence {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("reference solve under-resolved: halving ref steps moved the endpoint by {shift:e}, measured error {error:e}")]
    ReferenceResolution { shift: f64, error: f64 },

    #[error("{phase} failed for T={steps}: {source}")]
    Phase {
        phase: &'static str,
        steps: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at {path}: {message}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str, steps: usize) -> Self {
        Error::Phase {
            phase,
            steps,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain { .. } | Error::Shape { .. } | Error::Parse { .. } => 1,
            Error::Degenerate(_)
            | Error::Numeric(_)
            | Error::Divergence { .. }
            | Error::ReferenceResolution { .. } => 2,
            Error::Io { .. } => 3,
            Error::Phase { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
