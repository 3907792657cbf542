//! Low-rank solvers for the 1D1V Vlasov-Poisson equation
//!
//! ```text
//! d_t f = -v d_x f + E d_v f,   -d_xx phi = 1 - int f dv,   E = -d_x phi
//! ```
//!
//! The density is kept in factored form `f = U S V^T` and advanced either by
//! dynamical low-rank integrators ([`dlr`]: projector splitting, BUG,
//! augmented BUG) or by step-and-truncate schemes ([`sat`]: factored
//! Euler/Runge-Kutta and split semi-Lagrangian). [`reference`] holds the
//! full-grid solvers used as oracles, and [`diagnostics`] the conserved
//! quantities and their CSV form.

// NaN must fail the range checks, so they are written as negations.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod dlr;
pub mod driver;
pub mod error;
pub mod grid;
mod linalg;
pub mod lowrank;
pub mod reference;
pub mod sat;
pub mod snapshot;
pub mod vlasov;

pub use error::{KinlrError, Result};
pub use grid::{Grid1D, PhaseGrid, Side};
pub use lowrank::{FactoredSum, LowRankState, Moments, TruncationMode, TruncationPolicy};
pub use vlasov::{ProblemKind, ProblemSpec};
