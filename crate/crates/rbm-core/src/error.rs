use thiserror::Error;

/// Errors produced by model construction, simulation, and measurement.
#[derive(Error, Debug)]
pub enum RbmError {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The system model itself cannot support the requested operation
    /// (e.g. too few particles for a variance functional).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A numeric input or intermediate left the representable domain
    /// (NaN or infinity).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A configuration document failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A realization produced a non-finite state and was aborted.
    #[error("realization {realization} diverged at step {step}")]
    Diverged { realization: u64, step: u64 },

    /// An order fit was refused (too few usable rows, all-zero errors,
    /// or an underpowered table). Maps to exit code 2 in the CLI.
    #[error("fit refused: {0}")]
    FitRefused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RbmError>;

impl RbmError {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        RbmError::InvalidArgument(msg.into())
    }

    pub fn invalid_model(msg: impl Into<String>) -> Self {
        RbmError::InvalidModel(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        RbmError::NumericDomain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        RbmError::Config(msg.into())
    }
}
