//! Optimal proportional reinsurance by gradient training of feedback
//! policies.
//!
//! The surplus of an insurer follows a discretized jump process with premium
//! income, reinsurance cost, compound-Poisson claims, and a mean-reverting
//! perturbation. A small feedforward network maps the observed surplus to a
//! retention level; training maximizes a convex combination of expected
//! exponential utility of terminal wealth and a smooth surrogate of the
//! finite-horizon ruin probability. Sweeping the combination weight traces
//! the trade-off frontier between the two objectives.

pub mod config;
pub mod error;
pub mod experiments;
pub mod model;
pub mod objective;
pub mod policy;
pub mod seed;
pub mod train;

mod reduce;

pub use error::{Error, Result};
