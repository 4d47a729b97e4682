//! Numerical toolkit for weighted Hardy spaces on the line and the plane.
//!
//! The crate covers Muckenhoupt and reverse-Hölder characteristics of
//! weights, maximal functions and the discrete `H^p_w` quasi-norm, atom and
//! molecule validation, a constructive atomic decomposition in one
//! dimension, singular integrals and the Riesz potential, and seeded
//! experiments that measure the constants in the boundedness results.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atoms;
pub mod czdecomp;
pub mod error;
pub mod experiments;
mod fft;
pub mod format;
pub mod grid;
pub mod maximal;
pub mod operators;
pub mod quad;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{Ball, DyadicCube, Grid, GridFunction};
pub use weights::WeightSpec;

/// Version string embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Schema version of every JSON document the toolkit emits.
pub const SCHEMA_VERSION: u32 = 1;
