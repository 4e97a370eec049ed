use thiserror::Error;

/// Errors raised across the game, solver and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmfgError {
    /// Malformed input: out-of-range parameters, bad shapes, non-stochastic rows.
    #[error("validation error: {0}")]
    Validation(String),

    /// Dimension disagreement between two objects that must line up.
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Solver configuration that cannot be run (for example `lambda * eta >= 1`).
    #[error("config error: {0}")]
    Config(String),

    /// Policy evaluation failed, typically a zero probability under entropy regularization.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Mirror-descent step could not be applied.
    #[error("step error: {0}")]
    Step(String),

    /// The KL metric is undefined for the given pair of policies.
    #[error("metric error: {0}")]
    Metric(String),

    /// A NaN or infinity appeared in an iterate.
    #[error("numerical failure at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, GmfgError>;

pub(crate) fn validation(msg: impl Into<String>) -> GmfgError {
    GmfgError::Validation(msg.into())
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GmfgError::DimensionMismatch { what, expected, got })
    }
}
