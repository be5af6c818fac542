//! Gradient-flow-preserving pruning for small networks.
//!
//! The crate bundles everything needed to study when, how, and what to prune
//! on desk-scale models:
//!
//! - [`tape`]: reverse-mode autodiff with exact second-order
//!   Hessian-vector products via nested differentiation;
//! - [`model`]: maskable MLP / small CNN architectures with optional
//!   per-node auxiliary gates;
//! - [`criteria`]: per-parameter importance scores (crop, grasp, snip,
//!   magnitude, random) and global mask construction;
//! - [`structured`]: per-node gate scoring, node masks, and physical
//!   compaction into genuinely smaller models;
//! - [`lifecycle`]: the pruning-time detector, one-shot/iterative schedules,
//!   and the train/prune/train pipeline;
//! - [`diagnostics`]: numerical checks of the gradient-flow / NTK relation
//!   and the Taylor assumptions behind the scores;
//! - [`data`] and [`checkpoint`]: dataset generation and ingestion,
//!   model/mask persistence, sparse-storage size estimates.

pub mod checkpoint;
pub mod criteria;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod lifecycle;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod structured;
pub mod tape;
pub mod tensor;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
