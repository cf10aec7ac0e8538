//! Variational-score momentum diffusion: forward kernels, score networks,
//! samplers, schedule optimization and evaluation metrics.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod kernels;
pub mod processes;
pub mod samplers;
pub mod scorenet;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
