//! Regularized solution of ill-posed linear systems A u = f from noisy data,
//! by integrating the damped gradient flow
//!
//! ```text
//!     u'(t) = -[B u(t) + eps(t) u(t) - A^T f],   B = A^T A,
//! ```
//!
//! along a slowly decaying regularization schedule eps(t), with principled
//! stopping rules that pick the time to read off the answer from the noise
//! level alone.
//!
//! The crate splits into:
//! - [`operator`]: dense operators, the normal system, spectral
//!   decompositions, regularized resolvent solves
//! - [`schedule`]: admissible decay schedules eps(t) and their certification
//! - [`solver`]: the time integrator, the comparison path w(t), and the
//!   tracking/error envelopes
//! - [`stopping`]: discrepancy-style and a-priori rules choosing the readout
//!   time
//! - [`problems`]: classic ill-posed test problems and noise generation
//! - [`bench`]: deterministic experiment driver behind the `dsmreg` binary

pub mod bench;
pub mod error;
pub mod io;
pub mod operator;
pub mod problems;
pub mod quadrature;
pub mod schedule;
pub mod solver;
pub mod stopping;

pub use error::{DsmError, Result};
pub use operator::{
    build_normal_system, commutation_residual, resolvent_apply, spectral_decompose,
    tikhonov_solve, DenseOperator, NormalSystem, SpectralDecomposition,
};
pub use schedule::{CertificationReport, EpsilonSchedule, ScheduleSpec};
