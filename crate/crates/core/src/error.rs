use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The retained photon-number range loses more probability than allowed.
    #[error("truncation insufficient: leaked mass {leaked:.3e} exceeds tolerance {tolerance:.3e}")]
    TruncationInsufficient { leaked: f64, tolerance: f64 },

    #[error("invalid truncation budget: {0}")]
    InvalidBudget(String),

    #[error("efficiency {0} outside (0, 1]")]
    InvalidEfficiency(f64),

    #[error("domain error: {0}")]
    Domain(String),

    /// The operation needs a density but the kernel is a Dirac measure (or vice versa).
    #[error("kernel kind error: {0}")]
    Kind(String),

    #[error("grid resolution error: {0}")]
    Resolution(String),

    #[error("unsupported state: {0}")]
    UnsupportedState(String),

    #[error("divisor |tr[W*T]| = {min:.3e} falls below threshold {threshold:.3e} on the required support")]
    DivisorThreshold { min: f64, threshold: f64 },

    #[error("reconstructed operator has trace {0:.3e}; cannot normalize")]
    ZeroTrace(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
