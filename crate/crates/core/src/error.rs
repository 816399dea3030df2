//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands live on different grids or have incompatible shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A coefficient returned a non-finite value.
    #[error("non-finite {what} at t={t}, u={u:?}")]
    Evaluation { what: &'static str, t: f64, u: Vec<f64> },

    /// The simulated state became non-finite.
    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    /// The regression Gram matrix could not be factorized.
    #[error("regression design is rank-deficient at step {step}")]
    RankDeficient { step: usize },

    /// The requested computation is outside the supported problem class.
    #[error("unsupported problem: {0}")]
    Unsupported(String),

    /// A configuration file could not be interpreted.
    #[error("configuration error: {0}")]
    Config(String),

    /// A log-log fit had too few usable points.
    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
