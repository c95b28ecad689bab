//! Desk-scale federated domain-generalization simulator.
//!
//! Clients each hold one source domain of a synthetic multi-domain world and
//! share a frozen two-tower [`encoder`]. Training runs in two stages:
//!
//! 1. [`mst`]: every client trains one small transform network per external
//!    domain, steering its image embeddings along the text-embedding change
//!    direction between domain descriptions, and builds an augmentation bank.
//! 2. [`prompts`] + [`fedruntime`]: a shared global prompt and a domain
//!    classifier are trained on original plus augmented embeddings and
//!    averaged by the server every round; each client also trains a private
//!    domain prompt that is only collected after the last round.
//!
//! At inference the classifier's domain weights mix the collected domain
//! prompts into a per-sample prompt for the unseen domain.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod encoder;
pub mod seed;
pub mod datagen;
pub mod mst;
pub mod prompts;
pub mod fedruntime;

pub use error::{Error, Result};
