//! Multi-level siamese self-supervised learning at desk scale.
//!
//! A staged residual encoder is trained with non-contrastive (BYOL-style)
//! losses attached to every stage, not only the top. Each loss-bearing stage
//! owns a projector/predictor pair fed through a global-pooling side branch,
//! and lower stages may instead carry a dense per-location loss whose
//! targets are picked by cosine-similarity matching.
//!
//! Module map:
//! - [`backbone`]: parameters, staged encoder, residual blocks.
//! - [`ssl`]: heads, pair/dense losses, the ladder total, weight and EMA schedules.
//! - [`augment`]: two-view augmentation.
//! - [`data`], [`checkpoint`], [`metrics`]: datasets, persistence, logs.
//! - [`optim`], [`train`]: optimizers, schedules, and the training loop.
//! - [`eval`]: linear probes and diagnostics.
//! - [`config`]: the `key = value` run configuration.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod seed;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
pub use lsn_tensor as tensor;
