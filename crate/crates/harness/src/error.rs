use mmse_core::MmseError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: field `{field}`: {message}")]
    Config {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{failed} of {total} replications failed (limit {limit:.1}%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
        first: String,
    },

    #[error(transparent)]
    Core(#[from] MmseError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Validation(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
