use crate::estimator::Estimate;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix contains non-finite or asymmetric entries")]
    InvalidMatrix,

    #[error("matrix has zero Frobenius norm")]
    ZeroMatrix,

    #[error("spectrum is empty or all-zero")]
    ZeroSpectrum,

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("input outside kernel domain: {0}")]
    Domain(String),

    #[error("spectral decay exponent must exceed 1/2, got {0}")]
    UnsupportedAlpha(f64),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The sampled squared-Frobenius estimate was non-positive, so no rank
    /// ratio can be formed. The raw components are preserved for diagnostics.
    #[error("degenerate estimate: frob2_hat = {} is not positive", .0.frob2_hat)]
    DegenerateEstimate(Box<Estimate>),

    #[error("regression failure: {0}")]
    Fit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
