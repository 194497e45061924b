//! Second-order annihilating particle system, its kinetic limit PDE, and
//! the Kolmogorov kernel toolkit used to check both.

pub mod empirical;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod kinetic_pde;
pub mod model;
pub mod particle_sim;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
