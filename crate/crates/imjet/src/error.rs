use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are coarse on purpose: the runner maps them onto exit codes, and
/// the message carries the specifics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed arguments: dimension mismatches, out-of-range indices.
    #[error("input error: {0}")]
    Input(String),
    /// A request beyond what the implementation supports (order limits, truncation too small).
    #[error("capability error: {0}")]
    Capability(String),
    /// A mathematical precondition does not hold (exponent outside its window, …).
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// No admissible gap ladder within the truncation.
    #[error("infeasible ladder at level {level}: {reason}")]
    InfeasibleLadder { level: usize, reason: String },
    /// Fixed-point iteration failed to contract or converge.
    #[error("divergence: {0}")]
    Divergence(String),
    /// Time stepping failed (step-size cascade, non-finite values).
    #[error("stiffness error: {0}")]
    Stiffness(String),
    /// Argument outside the domain of a local object.
    #[error("domain error: {0}")]
    Domain(String),
    /// Query outside the region covered by sampled data.
    #[error("coverage error: {0}")]
    Coverage(String),
    /// Not enough samples for a fit or check.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    /// Serialization / I/O failures.
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Input(format!("{what}: dimension {got}, expected {want}")));
    }
    Ok(())
}
