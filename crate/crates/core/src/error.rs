use thiserror::Error;

use crate::lp::SolveStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// `I - Δ·Φu` is too close to singular for the Neumann bounds to apply.
    #[error("mismatch too large: ‖Δ·Φu‖ = {norm:.6} (must stay below 1)")]
    Conditioning { norm: f64 },

    #[error("structure violation: {0}")]
    Structure(String),

    #[error("premise of the radius bound violated: {0}")]
    Premise(String),

    #[error("solver finished with status {status}: {context}")]
    Solver { status: SolveStatus, context: String },

    #[error("all {points} grid points failed (best status: {best_status})")]
    GridInfeasible { points: usize, best_status: SolveStatus },

    #[error("nominal model sampling gave up after {tries} tries ({accepted} accepted, acceptance rate {rate:.4})")]
    Sampling { tries: usize, accepted: usize, rate: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), reason: reason.into() }
    }
}
