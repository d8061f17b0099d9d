use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("NaN appeared in solver iterate at iteration {iteration}")]
    NanInIterate { iteration: usize },

    #[error("solver diverged at step {step} (iterate norm {norm:.3e}); try a smaller learning rate")]
    Divergence { step: usize, norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem too large for dense factorisation: n = {n} exceeds {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("all SGD learning-rate candidates diverged: {0:?}")]
    AllCandidatesDiverged(Vec<f64>),

    #[error("at optimiser step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<GpError>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<GpError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl GpError {
    pub fn at_step(self, step: usize) -> Self {
        GpError::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        GpError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            GpError::DimensionMismatch { .. }
            | GpError::NonFinite(_)
            | GpError::InvalidArgument(_)
            | GpError::TooLarge { .. }
            | GpError::Parse { .. } => ErrorClass::Validation,
            GpError::NotPositiveDefinite(_)
            | GpError::NanInIterate { .. }
            | GpError::Divergence { .. }
            | GpError::AllCandidatesDiverged(_) => ErrorClass::Numerical,
            GpError::Io(_) => ErrorClass::Io,
            GpError::Csv(e) if e.is_io_error() => ErrorClass::Io,
            GpError::Csv(_) | GpError::Json(_) => ErrorClass::Validation,
            GpError::AtStep { source, .. } | GpError::Context { source, .. } => source.class(),
        }
    }
}

pub type Result<T, E = GpError> = std::result::Result<T, E>;
