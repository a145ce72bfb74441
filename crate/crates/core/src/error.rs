use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("exponential loss overflow at task {task}: margin {margin}")]
    Overflow { task: usize, margin: f64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("degenerate task {task}: diagonal Gram entry {value:e}")]
    DegenerateTask { task: usize, value: f64 },
    #[error("max-margin problem infeasible: {0}")]
    Infeasible(String),
    #[error("solver did not converge after {iterations} sweeps (max violation {max_violation:e})")]
    NotConverged { iterations: usize, max_violation: f64 },
    #[error("zero matrix has no direction")]
    ZeroMatrix,
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("projected MLE requires a subspace")]
    MissingSubspace,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed data file: {0}")]
    Format(String),
}

impl Error {
    /// Failures of the numerics (as opposed to bad input). The CLI maps these
    /// to exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::NonFiniteLoss { .. }
                | Error::DegenerateTask { .. }
                | Error::Infeasible(_)
                | Error::NotConverged { .. }
                | Error::ZeroMatrix
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
