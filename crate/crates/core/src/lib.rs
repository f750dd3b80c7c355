//! Two-dimensional to three-dimensional human pose lifting with alternating
//! transformer encoders and grouped graph-convolution blocks.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and a
//! differentiation tape, [`skeleton`] builds the joint graph and its
//! three-way adjacency split, [`graphconv`] and [`encoder`] implement the two
//! kinds of layers, [`model`] stacks them, and [`training`], [`data`] and
//! [`metrics`] cover the rest of the workflow.

// Index loops read closer to the matrix formulas; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod graphconv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod params;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
