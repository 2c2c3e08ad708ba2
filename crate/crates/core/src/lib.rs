//! Exact attention decoding through energy-function tree reductions.
//!
//! Attention over a query and `N` keys equals the gradient, with respect to
//! an auxiliary source vector, of the log-partition function
//! `F = logsumexp_a(q . k_a + zeta . v_a)`. Because `logsumexp` and `max`
//! are associative, `F` and its gradient can be computed with `p` workers in
//! `O(N / p + log p)` steps. This crate implements that decoding scheme,
//! the ring-attention baseline, and a two-tier cluster cost model to compare
//! them.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: dtype rounding emulation, tensors, stable logsumexp, seeded data
//! - [`attention`]: naive, online and chunked single-device attention
//! - [`energy`]: the energy function, its gradients and moments
//! - [`reduction`]: tree / ring / hierarchical reduction schedules
//! - [`sim`]: link cost model, topology config, counters and closed forms
//! - [`decode`]: tree decoding and ring decoding over a sharded KV cache
//! - [`bench`], [`verify`], [`cli`]: the `tree-attn` command-line tool

pub mod attention;
pub mod bench;
pub mod cli;
pub mod decode;
pub mod energy;
pub mod error;
pub mod numerics;
pub mod reduction;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{DType, Tensor};
pub use num_rational::Ratio;
