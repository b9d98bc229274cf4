//! Amortized Bayesian meta-learning of low-rank adapters on a small
//! decoder-only transformer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod distributions;
pub mod error;
pub mod lora;
pub mod lm;
pub mod metatrain;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
