//! Numerical laboratory for wild solutions of the compressible and
//! incompressible Euler equations via convex integration.

pub mod error;
pub mod grid;
pub mod harness;
pub mod matgeom;
pub mod scheme;
pub mod subsolution;
pub mod viscous;
pub mod wavegen;

pub use error::{Error, Result};
