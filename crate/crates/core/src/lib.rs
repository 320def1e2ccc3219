//! Iterative proportional scaling and its relatives for Poisson log-affine
//! models `mu = q * exp(X beta)`.
//!
//! The crate is organized bottom-up: [`design`] builds design matrices,
//! [`model`] evaluates objectives and bounds, [`solvers`] holds the
//! iterative algorithms and [`harness`] generates synthetic instances and
//! runs experiments.

pub mod design;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod solvers;
pub mod surrogate;

pub use design::{DesignKind, DesignMatrix, Factor, TableSchema};
pub use error::{Error, Result};
pub use model::{Coefficients, ProblemInstance, WChoice};
pub use solvers::{fit, ClockMode, ConvergenceTrace, FitFlags, FitResult, ObjectiveKind, SolverConfig, Termination, TraceRecord, Variant};
