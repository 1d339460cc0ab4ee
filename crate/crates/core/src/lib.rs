//! Impact-point selection and estimation for sparse semiparametric
//! bi-functional regression.
//!
//! A scalar response depends linearly on a curve observed at `p` grid points and
//! nonparametrically on a single-index projection of a second curve:
//!
//! ```text
//! Y = sum_j beta_j zeta(t_j) + m(<theta, X>) + eps
//! ```
//!
//! [`fassmr`] and [`iassmr`] pick a sparse set of impact points; [`method`]
//! exposes them behind a runtime registry and [`simlab`] drives Monte Carlo
//! experiments.

pub mod direction;
pub mod engine;
pub mod error;
pub mod fassmr;
pub mod functional;
pub mod iassmr;
pub mod kernel;
pub mod method;
pub mod scad;
pub mod simlab;

pub use error::{Error, ErrorKind, Result};
