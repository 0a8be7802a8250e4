use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("reduced system is singular (pivot {pivot:e} at row {row})")]
    Singular { row: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("MMA dual solve failed: multiplier bracket [{lower:e}, {upper:e}], constraint residual {residual:e}")]
    DualSolver {
        lower: f64,
        upper: f64,
        residual: f64,
    },

    #[error("optimality-criteria bisection failed: bracket [{lower:e}, {upper:e}], volume {volume}")]
    Bisection {
        lower: f64,
        upper: f64,
        volume: f64,
    },

    #[error("lookback buffer is empty")]
    EmptyBuffer,

    #[error("cosine distance undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("gradient network has not been trained")]
    Untrained,

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("batch evaluation failed: {failed} of {total} samples failed")]
    BatchFailed { failed: usize, total: usize },

    #[error("iteration {index}: {source}")]
    Iteration {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed surrogate file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_iteration(self, index: usize) -> Self {
        Error::Iteration {
            index,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
