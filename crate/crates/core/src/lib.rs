//! Desk-scale decentralized diffusion laboratory.
//!
//! Independent flow-matching experts are trained on disjoint clusters of a
//! synthetic Gaussian mixture, combined at inference by a post-hoc router, and
//! integrated with Euler/Heun probability-flow solvers. The [`diagnostics`]
//! module measures trajectory sensitivity (Jacobian spectral norms), step
//! refinement disagreement, expert alignment and switching behaviour.

pub mod checkpoint;
pub mod dataworld;
pub mod diagnostics;
pub mod error;
pub mod flowexperts;
pub mod numcore;
pub mod rng;
pub mod router;
pub mod sampler;
pub mod stats;
pub mod system;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
