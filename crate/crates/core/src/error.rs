use std::fmt;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by a [`Transport`](crate::decomp::Transport) or by the
/// collective protocols layered on top of it.
#[derive(Debug, Error)]
pub enum CommError {
    #[error("rank {rank}: timed out waiting for a message from rank {from} (tag {tag:#x})")]
    Timeout { rank: usize, from: usize, tag: u32 },
    #[error("rank {rank}: peer {peer} disconnected")]
    Disconnected { rank: usize, peer: usize },
    #[error("rank {rank}: {direction} exchange failed: {reason}")]
    Exchange {
        direction: &'static str,
        rank: usize,
        reason: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("socket transport: {0}")]
    Socket(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("source has non-zero global mean {mean:e} (max |rhs| = {scale:e}); the periodic/Neumann problem is singular")]
    Singular { mean: f64, scale: f64 },
    #[error("BiCGStab did not converge in {iterations} iterations (last relative residual {:e})", history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { iterations: usize, history: Vec<f64> },
    #[error("BiCGStab breakdown at iteration {iteration}: |{quantity}| fell below threshold; restart the solve")]
    Breakdown {
        iteration: usize,
        quantity: &'static str,
    },
    #[error("ILU(0) zero pivot at local cell {cell}")]
    ZeroPivot { cell: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("decomposition error: {0}")]
    Decomposition(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("stability error: Courant number {courant} exceeds 1")]
    Stability { courant: f64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("diagnostics error: {0}")]
    Diagnostics(String),
    /// An error reported by another process or by the service.
    #[error("{message}")]
    Remote { category: ErrorCategory, message: String },
    #[error("component `{component}` failed during {stage}: {source}")]
    Component {
        component: String,
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Decomposition(_) | Error::Registration(_) => {
                ErrorCategory::Config
            }
            Error::Solver(_) | Error::Stability { .. } => ErrorCategory::Numeric,
            Error::Comm(_) => ErrorCategory::Communication,
            Error::Format(_) | Error::Io { .. } | Error::Diagnostics(_) => ErrorCategory::Io,
            Error::Component { source, .. } => source.category(),
            Error::Remote { category, .. } => *category,
        }
    }
}

/// Coarse classification used for process exit codes and service error bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Config,
    Numeric,
    Communication,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 1,
            ErrorCategory::Numeric => 2,
            ErrorCategory::Communication => 3,
            ErrorCategory::Io => 4,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Communication => "communication",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}
