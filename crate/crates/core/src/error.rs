use std::path::PathBuf;

use crate::trace::FilterCriterion;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),
    #[error("event rejected by filter criterion `{0}`")]
    FilterRejected(FilterCriterion),
    #[error("invalid feature vector: {0}")]
    InvalidFeature(String),

    #[error("corpus has {0} feature vectors, at least 2 are required")]
    EmptyCorpus(usize),
    #[error("bounds collapse in dimension {dim} (lower = upper = {value})")]
    DegenerateBounds { dim: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("component mass {mass:e} inside the bounding box is below 1e-300")]
    NumericalUnderflow { mass: f64 },
    #[error("event {index} lies outside the model bounds")]
    OutOfBounds { index: usize },
    #[error("component {component} collapsed (total responsibility {weight:e})")]
    EmptyComponent { component: usize, weight: f64 },
    #[error("{n} events cannot support the requested fit, at least {required} are required")]
    NotEnoughData { n: usize, required: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("no sample accepted in {batches} consecutive batches")]
    AcceptanceStall { batches: usize },
    #[error("longitudinal speed must be positive, got {0}")]
    InvalidSpeed(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalUnderflow { .. }
            | Error::EmptyComponent { .. }
            | Error::NonFinite(_)
            | Error::NotPositiveDefinite(_)
            | Error::AcceptanceStall { .. } => true,
            Error::File { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
