//! Distributed homotopy primal-dual (DHPD) temporal-difference policy evaluation.
//!
//! The crate is split along the natural seams of the problem:
//!
//! * [`chain`]: the fixed-policy Markov chain with per-agent rewards, its
//!   stationary distribution, trajectory sampling and mixing diagnostics.
//! * [`features`]: linear feature dictionaries and their norm bounds.
//! * [`objective`]: the MSPBE, its Fenchel saddle-point form, exact and
//!   sampled gradients, and the closed-form saddle point.
//! * [`network`]: communication graphs and doubly stochastic mixing matrices.
//! * [`solver`]: DHPD and the stochastic primal-dual baselines.
//! * [`analysis`]: optimality/surrogate gaps, mixing-time and rate-bound
//!   formulas, and empirical checks of the convergence lemmas.

pub mod analysis;
pub mod chain;
mod error;
pub mod features;
pub mod io;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod solver;

pub use error::{Error, Result};

pub use nalgebra;
