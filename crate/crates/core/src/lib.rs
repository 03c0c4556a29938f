//! Numerical library for transport-equation inverse problems: upwind and
//! semi-Lagrangian forward solvers, Carleman-weighted inequality
//! verification, energy estimates, and single-measurement reconstruction
//! of sources and coefficients with empirical stability ratios.

pub mod carleman;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod inverse;
pub mod logscale;
pub mod par;
pub mod transport;
pub mod weights;

pub use error::{Error, Result};
