//! Pseudo-spectral engine for a single convex-integration step of the 2.5D
//! Hall-magnetohydrodynamic system with fractional dissipation.

pub mod error;
pub mod blocks;
pub mod field;
pub mod geometry;
pub mod iterate;
pub mod norms;
pub mod perturb;
pub mod spectral;
pub mod stress;

pub use error::{Error, Result};
pub use field::{Grid, Rank, Slice, Symmetry, TorusField};
