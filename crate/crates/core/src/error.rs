use thiserror::Error;

/// Errors raised by the certification engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding norm {norm} exceeds declared bound F = {bound}")]
    NormViolation { norm: f64, bound: f64 },

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("table model has no entry for this input and snapping is disabled")]
    UnseenInput,

    #[error("unknown sample id `{0}`")]
    UnknownId(String),

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("label `{0}` has no reference entries")]
    LabelAbsent(String),

    #[error("no reference entries carry a label different from `{0}`")]
    NoOtherLabel(String),

    #[error("margin {margin} must be positive to certify; reject the sample")]
    NonPositiveMargin { margin: f64 },

    #[error("margin {margin} exceeds 2F = {limit}; inputs are corrupted")]
    ImpossibleMargin { margin: f64, limit: f64 },

    #[error("empty denominator: {0}")]
    EmptyDenominator(&'static str),

    #[error("quadrature did not reach tolerance {tol:e} (estimated error {estimate:e})")]
    QuadratureNotConverged { tol: f64, estimate: f64 },

    #[error("exact smoothing unsupported for input dimension {0} (max 2)")]
    UnsupportedDimension(usize),

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn for_sample(self, id: &str) -> Self {
        match self {
            e @ Error::Sample { .. } => e,
            other => Error::Sample {
                id: id.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
