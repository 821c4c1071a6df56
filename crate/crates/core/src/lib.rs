//! Weighted polynomial inequalities on the unit ball `B^d` (`d = 2, 3`):
//! metric geometry, weights, cubature, orthonormal bases, kernels,
//! Christoffel functions and Markov factors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod christoffel;
pub mod config;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod markov;
pub mod polyspace;
pub mod quadrature;
pub mod rng;
pub mod run;
pub mod thresholds;
pub mod weights;

pub use error::{Error, Result};
