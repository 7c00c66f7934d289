//! Power-law trend regression on regular d-dimensional lattices.
//!
//! The model is `y_u = sum_i sum_j beta_ij * u_i^theta_ij + x_u` for sites
//! `u` of the box `{1..n_1} x ... x {1..n_d}` with weakly dependent errors
//! `x_u`. Exponents and coefficients are estimated jointly by nonlinear
//! least squares with the coefficients profiled out; standard errors come
//! from the (rank-deficient) joint normal limit of the estimates.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod design;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod nlse;
pub mod rng;
pub mod simulate;
pub mod spectral;

pub use error::{Result, TrendError};
