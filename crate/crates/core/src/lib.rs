//! Contextual blocks and the exact transfer of prompt context into MLP weights.
//!
//! A contextual block is a contextual layer `A` (self-attention, or any layer that
//! can run with or without context) followed by an MLP whose first layer has
//! weights `W`. Running the block on a prompt with context is identical to
//! running it without (part of) that context after a rank-one update of `W`.
//! This crate computes those updates, the token-by-token dynamics they induce,
//! and trains small blocks on in-context linear regression to check the
//! identities on learned weights.

pub mod checkpoint;
pub mod contextual_block;
pub mod contextual_layer;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod numerics;
pub mod plot;
pub mod stats;
pub mod suites;
pub mod tasks;
pub mod training;
pub mod weight_transfer;

pub use contextual_block::{block_forward, predict, Activation, BlockParams, MlpParams};
pub use contextual_layer::{attend, context_vector, AttentionParams, ContextualLayer, EmaParams, PromptMatrix};
pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Vector};
pub use weight_transfer::{apply_update, delta_w, transfer, verify_transfer, WeightUpdate};
