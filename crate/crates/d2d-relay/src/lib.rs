//! Joint resource-block and power allocation for relay-aided D2D
//! communication in an OFDMA cell, with nominal, worst-case robust and
//! chance-constrained interference protection.

// `!(x > 0.0)` is used on purpose so NaN lands on the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocator;
pub mod baselines;
pub mod chance;
pub mod error;
pub mod harness;
pub mod propagation;
pub mod robustness;
pub mod topology;

pub use error::{Error, Result};
