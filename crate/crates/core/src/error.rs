use thiserror::Error;

/// Errors raised by the estimation engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmseError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("reference model not identified at eta: {0}")]
    NotIdentified(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("degenerate likelihood: all g-values are zero for simulated draw {draw}")]
    DegenerateLikelihood { draw: usize },

    #[error("posterior weights are all zero for observation {index}")]
    EmptyPosterior { index: usize },

    #[error("no detectable deviation directions (lambda_max = {lambda_max:e}); epsilon is unbounded")]
    UnboundedEpsilon { lambda_max: f64 },
}

pub type Result<T> = std::result::Result<T, MmseError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(MmseError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
