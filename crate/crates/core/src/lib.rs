//! Geometric collapse of learned embeddings: dense MLP training, the
//! geometric quantities of embeddings (gradient complexity, class-distance
//! normalized variance), generalization and transfer bounds, and few-shot
//! evaluation with ridge heads.
//!
//! With the `parallel` feature (on by default) per-example work runs on
//! rayon; results are identical to the sequential path.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
