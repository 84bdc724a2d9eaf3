//! Random batch simulation of interacting particle systems with
//! per-particle weights and multiple species.
//!
//! At every macro step of size `tau` the particles are divided uniformly at
//! random into batches of size `p`, and interactions are evaluated only
//! inside batches, cutting the per-step cost from O(N^2) to O(Np). The crate
//! provides:
//!
//! - [`model`]: the system definition (weights, species, kernel catalog,
//!   external drift, noise, dynamics order) and exact/batch force evaluation;
//! - [`batching`]: uniform random divisions, indicator statistics, and
//!   exhaustive division enumeration for exact identity checks;
//! - [`integrator`]: Euler-Maruyama stepping of the full-interaction
//!   reference system and the random-batch system under shared Brownian
//!   increments;
//! - [`metrics`]: the weighted strong error, weighted empirical measures,
//!   test-function weak errors, and the force-error moment identities;
//! - [`harness`]: tau sweeps, convergence-order fits, and per-step cost
//!   benchmarks.
//!
//! All randomness flows through counter-based [`rng::RngStream`]s keyed by
//! `(seed, purpose, realization, step)`, so results are bitwise reproducible
//! for any number of worker threads.

pub mod batching;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{RbmError, Result};
