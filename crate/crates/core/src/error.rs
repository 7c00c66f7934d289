//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrendError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrendError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scaled Gram matrix is near singular (condition estimate {condition:.3e} exceeds {threshold:.3e})")]
    NearSingularGram { condition: f64, threshold: f64 },

    #[error("insufficient data: N = {n_obs} must exceed 2p = {twice_p}")]
    InsufficientData { n_obs: usize, twice_p: usize },

    #[error("every feasible coarse grid point produced a near-singular Gram matrix")]
    AllGridPointsSingular,

    #[error("Upsilon matrix is not positive definite (exponents too close together)")]
    DegenerateUpsilon,

    #[error("closed-form Cauchy inverse is singular: {0}")]
    FormulaSingularity(String),

    #[error("zero null hypothesis for coefficient {0} cannot be tested: coefficients are nonzero by assumption")]
    ZeroNullForBeta(String),

    #[error("joint test covers both exponent and coefficient of term {0}; the limit covariance is singular there")]
    InadmissibleJointTest(String),

    #[error("bandwidth {bandwidth} in dimension {dim} must be smaller than the extent {extent}")]
    BandwidthTooLarge { dim: usize, bandwidth: usize, extent: usize },

    #[error("unknown kernel name `{0}`")]
    UnknownKernel(String),

    #[error("study aborted: {failed} of {total} replications failed (more than 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl TrendError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrendError::NearSingularGram { .. }
                | TrendError::AllGridPointsSingular
                | TrendError::DegenerateUpsilon
                | TrendError::FormulaSingularity(_)
                | TrendError::TooManyFailures { .. }
        )
    }
}

impl From<std::io::Error> for TrendError {
    fn from(e: std::io::Error) -> Self {
        TrendError::Io(e.to_string())
    }
}

impl From<csv::Error> for TrendError {
    fn from(e: csv::Error) -> Self {
        TrendError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for TrendError {
    fn from(e: serde_json::Error) -> Self {
        TrendError::Parse(e.to_string())
    }
}
