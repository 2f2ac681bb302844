//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Failure raised by any core operation.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or mask extents do not line up.
    Dimension(String),
    /// A configuration value violates its invariant (even kernel, alpha <= 0, ...).
    Config(String),
    /// An argument is unusable (empty input, out-of-range label, ...).
    Argument(String),
    /// Patch coordinates or grid layout are inconsistent.
    Layout(String),
    /// A primitive produced NaN or infinity.
    NonFinite(String),
    /// A metric is undefined on the given input (e.g. single-class AUC).
    UndefinedMetric(String),
    /// Training failed; carries the step index at which it happened.
    Training { step: usize, message: String },
    /// The finite-difference oracle could not evaluate the target function.
    Oracle(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension(m) => write!(f, "dimension error: {m}"),
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Argument(m) => write!(f, "argument error: {m}"),
            CoreError::Layout(m) => write!(f, "layout error: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            CoreError::Training { step, message } => {
                write!(f, "training error at step {step}: {message}")
            }
            CoreError::Oracle(m) => write!(f, "oracle error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
