//! Data-free neural surrogates for compartmental epidemic ODEs.
//!
//! A feed-forward network is trained on the ODE residual over a box of
//! initial conditions and parameters (a "bundle"); its differentiable
//! solution map is then inverted by gradient descent to fit observations.
//! This crate is `no_std` and needs only `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]
// Negated comparisons are how NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod bundle;
pub mod diff;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod models;
pub mod net;
pub mod obs;
pub mod optim;
pub mod oracle;
pub mod train;

pub use error::{DiffError, Error, Result};
