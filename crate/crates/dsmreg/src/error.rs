//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error for construction, solving, stopping, and I/O.
#[derive(Debug, Error)]
pub enum DsmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("noise bound violated: ||f_noisy - f_clean|| = {observed:.6e} exceeds delta = {delta:.6e}")]
    NoiseBoundViolated { observed: f64, delta: f64 },

    #[error("operator is not injective: smallest singular value {0:.6e} is not positive")]
    NotInjective(f64),

    #[error("norm bound too small: largest singular value {sigma_max:.6e} exceeds sqrt({norm_bound_sq:.6e})")]
    NormBoundTooSmall { sigma_max: f64, norm_bound_sq: f64 },

    #[error("symmetric eigensolver failed to converge")]
    EigenFailure,

    #[error("symmetric factorization broke down (matrix not positive definite)")]
    FactorizationFailure,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("target level {beta:.6e} exceeds the schedule start {eps0:.6e}")]
    LevelAboveStart { beta: f64, eps0: f64 },

    #[error("target level {beta:.6e} is not reached by the schedule within representable time")]
    LevelUnreachable { beta: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target vector is zero")]
    DegenerateTarget,

    #[error("trajectory carries no error values; a known solution is required")]
    MissingErrorValues,

    #[error("integrator failed: {0}")]
    IntegratorFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DsmError>;
