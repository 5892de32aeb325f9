// SPDX-License-Identifier: Apache-2.0

//! Recovery of structured signals (sparse, block-sparse, low-rank) from noisy
//! linear measurements with the help of a similar prior signal.
//!
//! The estimators minimize a structure-inducing norm minus a correlation term
//! with the prior, `||x||_sig - <x, lambda*phi>`, subject to a measurement
//! fidelity ball `||y - A x||_2 <= delta`. Besides the solvers, the crate
//! computes Gaussian-width sample-complexity bounds for these programs and
//! runs phase-transition and method-comparison experiments.

pub mod cli;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod linalg;
pub mod prior;
pub mod proximal;
pub mod recovery;
pub mod solver;

pub use error::{Error, Result};
pub use ensembles::{MeasurementOperator, SignalShape, SignalSpec, Structure};
pub use proximal::{BlockPartition, PriorShift, StructureKind};
pub use recovery::{build_problem, Objective, ProblemKind, ProblemSpec};
pub use solver::{solve, SolverConfig, SolverResult, SolverStatus};

/// Library version recorded in experiment sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
