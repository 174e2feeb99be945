//! Simulation core for sparsified, clipped federated learning under model
//! poisoning: vectors and sketches, models, data, server defenses, attacks,
//! certified radii and the round loop.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
// `!(x >= 0.0)` rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod certify;
pub mod data;
pub mod defenses;
pub mod error;
pub mod models;
pub mod numkit;
pub mod rng;
pub mod simulator;
pub mod sparsefed;

pub use error::{Error, Result};
