use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface.
#[derive(Debug, Error)]
pub enum ScfmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("time {t} is at or below the singular floor {floor}")]
    TimeSingularity { t: f64, floor: f64 },
    #[error("solver stalled at t={t}: step size {h:e} underflowed")]
    SolverStall { t: f64, h: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("estimator degenerate: {0}")]
    EstimatorDegenerate(String),
    #[error("degenerate representation: {0}")]
    DegenerateRepresentation(String),
    #[error("construction failed: {0}")]
    Construction(String),
}

pub type Result<T, E = ScfmError> = std::result::Result<T, E>;

impl ScfmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScfmError::Io {
            path: path.into(),
            source,
        }
    }
}
