//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The Riccati iteration did not converge to a stabilizing solution.
    #[error("unstabilizable linearization")]
    UnstabilizableLinearization,

    /// Covariance factorization failed even after the jitter ladder.
    #[error("covariance factorization failed after jitter retries")]
    CovarianceFactorization,

    /// Every particle weight vanished; the reference filter cannot continue.
    #[error("particle degeneracy: all importance weights vanished")]
    ParticleDegeneracy,

    /// A linear-only routine was handed a model that is not affine.
    #[error("model is not linear")]
    NonLinearModel,

    #[error("no runs supplied")]
    EmptyRuns,

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config problems are 1, runtime errors 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 1,
            _ => 2,
        }
    }
}
