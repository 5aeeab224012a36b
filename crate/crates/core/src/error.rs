use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: dimension mismatch, invalid configuration, bad file.
    #[error("input error: {0}")]
    Input(String),
    /// A triangular factor has a zero or negative diagonal entry.
    #[error("singular factor: {0}")]
    SingularFactor(String),
    /// A matrix that must be positive definite is not, numerically.
    #[error("conditioning error: {0}")]
    Conditioning(String),
    /// A modeling precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The objective is not finite at the initial point.
    #[error("initialization error: {0}")]
    Initialization(String),
    /// A model fit failed to produce finite estimates.
    #[error("fit error: {0}")]
    Fit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
