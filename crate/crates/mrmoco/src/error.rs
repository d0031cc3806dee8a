//! Error types shared by the numerical modules.

use thiserror::Error;

/// Errors produced by field construction and the numerical operators.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter {name}: {reason} (got {value})")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
        value: f64,
    },

    /// Two fields that must share a grid have different dimensions.
    #[error("grid mismatch: {context} expected {expected:?}, got {got:?}")]
    GridMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A field constructor received data with non-finite entries.
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    /// A semi-implicit step produced a non-finite value; the caller may
    /// retry with a halved time step.
    #[error("time step diverged at pixel {pixel} (dt = {dt})")]
    StepDiverged { pixel: usize, dt: f64 },

    /// The fixed-point inversion of a deformation failed to contract.
    #[error("deformation inversion failed after {iterations} iterations (residual {residual})")]
    InversionFailed { iterations: usize, residual: f64 },

    /// An iterative linear solve did not reach the required residual.
    #[error("linear solve stalled at relative residual {residual} after {iterations} iterations")]
    LinearSolveFailed { iterations: usize, residual: f64 },

    /// Input is degenerate for the requested operation (e.g. a constant
    /// image passed to a histogram-based metric).
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    /// A generated dataset violates a physical validity requirement.
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// A configuration file failed to parse; `line` is 1-based.
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    /// File input/output failed; the path is included in the message.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: &'static str, value: f64) -> Self {
        Error::InvalidParameter {
            name,
            reason,
            value,
        }
    }
}

/// Convenience result alias for the numerical modules.
pub type Result<T> = std::result::Result<T, Error>;
