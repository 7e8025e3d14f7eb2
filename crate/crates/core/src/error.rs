use thiserror::Error;

use crate::mixture::NullFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("separation detected: coefficient norm exceeded {limit:e}")]
    Separation { limit: f64 },

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("degenerate likelihood: mixture density underflows at observation {index}")]
    DegenerateLikelihood { index: usize },

    /// Every restart of the null fit collapsed a component. Carries the best
    /// abandoned run, when one got far enough to be scored.
    #[error("degenerate component: all {restarts} restarts collapsed a mixture weight")]
    DegenerateComponent {
        restarts: usize,
        best: Option<Box<NullFit>>,
    },

    #[error("degenerate partition: components {0} and {1} have equal coefficient sums")]
    DegeneratePartition(usize, usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Parse,
    Fit,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_) | Error::TooLarge(_) => ErrorKind::Usage,
            Error::Parse { .. } => ErrorKind::Parse,
            Error::SingularFit(_)
            | Error::Separation { .. }
            | Error::Convergence(_)
            | Error::DegenerateLikelihood { .. }
            | Error::DegenerateComponent { .. }
            | Error::DegeneratePartition(..) => ErrorKind::Fit,
            Error::Domain(_) | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Io(_) | Error::Json(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
