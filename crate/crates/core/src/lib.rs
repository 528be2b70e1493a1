//! Negative-feedback generative recommendation on semantic IDs.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: interaction events, the synthetic generator, reason filtering
//!   and temporal splits.
//! - [`sidcodec`]: the residual-quantized autoencoder that turns item feature
//!   vectors into hierarchical semantic IDs.
//! - [`swing`]: Swing item-to-item scores over negative feedback.
//! - [`targets`]: next-negative, future-window and Swing-expanded target sets.
//! - [`policy`]: a small causal transformer over semantic-ID tokens with
//!   hand-written backpropagation, LoRA adapters, sampling and beam search.
//! - [`grpo`]: rewards, group-relative advantages, the clipped objective and
//!   the three-stage curriculum.
//! - [`eval`]: hit-ratio metrics, candidate accuracy and forgetting rate.
//! - [`filterpipe`]: offline similarity-threshold filtering.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod filterpipe;
pub mod grpo;
pub mod linalg;
pub mod optim;
pub mod policy;
pub mod seed;
pub mod sidcodec;
pub mod swing;
pub mod targets;
pub mod tensor_io;

pub use error::{Error, Result};
