//! Stable-rank guided low-rank adaptation.
//!
//! - [`linalg`]: dense matrices, Jacobi SVD, spectral/stable/effective rank.
//! - [`adapter`]: `ΔW = B·A` adapters with stochastic partial updating.
//! - [`planner`]: per-layer rank allocation from stable ranks.
//! - [`nn`]: a small pre-norm transformer with adapter slots and exact gradients.
//! - [`trainer`]: AdamW + cosine schedule training loop and run reports.
//! - [`synth`]: seeded few-shot tasks with a controllable domain gap.
//! - [`bundle`]: the manifest + payload checkpoint container.

pub mod adapter;
pub mod bundle;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod planner;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
