use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Model,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: factorisation failed at pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {difference:e}")]
    NotSymmetric {
        row: usize,
        col: usize,
        difference: f64,
    },

    #[error("eigenvalue {value:e} is below the admissible floor {floor:e}")]
    EigenvalueTooSmall { value: f64, floor: f64 },

    #[error("not a strict contraction: largest singular value {sigma_max} >= 1 - 1e-12")]
    NotStrictContraction { sigma_max: f64 },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate triangle {index} (area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("location ({x}, {y}) lies outside the mesh domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("duplicate points {first} and {second} make the covariance singular (nugget is zero)")]
    DuplicatePoints { first: usize, second: usize },

    #[error("denominator within 1e-12 of zero at index {index}")]
    NearZeroDenominator { index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("forward model failed when perturbing coordinate {coordinate}: {source}")]
    ForwardFailure {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line search failed after {halvings} halvings (gradient norm {gradient_norm:e})")]
    LineSearch {
        halvings: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("chain retains no samples (total {total}, burn-in {burn_in})")]
    EmptyChain { total: usize, burn_in: usize },

    #[error("sequence has zero variance")]
    ZeroVariance,

    #[error("truth field has zero norm")]
    ZeroNormTruth,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::EmptyChain { .. } => ErrorCategory::Config,
            Error::ShapeMismatch { .. }
            | Error::DegenerateTriangle { .. }
            | Error::OutsideDomain { .. }
            | Error::DuplicatePoints { .. }
            | Error::NotStrictContraction { .. }
            | Error::ZeroNormTruth => ErrorCategory::Model,
            _ => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
