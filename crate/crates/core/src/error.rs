use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LabError>;

/// Errors surfaced by the lab.
///
/// Shape mismatches inside tensor primitives are programming errors and
/// panic instead; everything reachable from user input (configs, corpora,
/// checkpoints, calibration data) comes through here.
#[derive(Debug, Error)]
pub enum LabError {
    /// A run configuration failed validation; `field` names the offending key.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// An operation was handed input it cannot work with.
    #[error("{op}: {message}")]
    InvalidInput { op: &'static str, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A checkpoint file is missing, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Corpus or dataset-cache trouble.
    #[error("data error: {0}")]
    Data(String),

    /// Kurtosis of a constant sample is undefined.
    #[error("zero-variance sample: kurtosis is undefined")]
    ZeroVariance,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config { field: field.into(), message: message.into() }
    }

    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        LabError::InvalidInput { op, message: message.into() }
    }
}
