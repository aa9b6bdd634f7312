#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Gaussian radial-basis exponential-integrator multistep samplers for
//! diffusion ODEs written in half-log-SNR `lambda = ln(alpha / sigma)`.

pub mod basis;
pub mod coeffs;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod quadrature;
pub mod sampler;
pub mod schedule;
pub mod shapeopt;
pub mod special;

pub use error::{Error, Result};
