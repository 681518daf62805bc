use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{field} {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("amplitude {amplitude} exceeds the injectivity bound; maximal admissible |amplitude| is < {max_admissible}")]
    AmplitudeTooLarge { amplitude: f64, max_admissible: f64 },

    #[error("inverse did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined condition number: matrix is singular or near-singular (min/max singular value {ratio:e})")]
    SingularMatrix { ratio: f64 },

    #[error("rejection sampler aborted: acceptance rate {rate:e} over the last {window} proposals is below {min_rate:e}")]
    SamplerStalled { rate: f64, window: u64, min_rate: f64 },

    #[error("bracket [{lo}, {hi}] does not straddle kappa0: drift has the same sign ({drift_lo:+.4}, {drift_hi:+.4}) at both ends")]
    BracketNoSignChange { lo: f64, hi: f64, drift_lo: f64, drift_hi: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { field, reason: reason.into() }
}
