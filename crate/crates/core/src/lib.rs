//! Numerical laboratory for the disordered copolymer model with an
//! inter-arrival law `K(n) = L(n)/n`, `L` slowly varying.
//!
//! The crate computes quenched, restricted and annealed partition functions
//! exactly (log-domain dynamic programming, with an exhaustive enumeration
//! oracle), estimates the quenched free energy by Monte Carlo over the
//! disorder, builds every transformed renewal kernel used by the upper and
//! lower bound constructions, and evaluates the closed-form bounds on the
//! free energy near the critical point `h = 0`.
//!
//! Modules:
//! - [`disorder`]: charge laws, cumulant function, Cramér rate function, tilting.
//! - [`kernel`]: slowly varying families, renewal kernels, tilted/defective kernels.
//! - [`partition`]: partition functions and the fractional-moment Monte Carlo.
//! - [`estimators`]: free-energy estimates and verifiers for the proof constructions.
//! - [`bounds`]: closed-form bound formulas and comparison tables.
//! - [`cli`]: the command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod disorder;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod numerics;
pub mod partition;
pub mod seeding;

pub use error::{Error, Result};
