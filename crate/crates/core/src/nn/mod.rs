//! Desk-scale transformer with adapter slots on the query, value and output
//! projections.
//!
//! Gradients come from a hand-written reverse pass over recorded
//! intermediates ([`GradTape`]); no general autodiff graph is built.

mod model;
mod ops;
mod tape;

pub use model::{adapter_seed, Block, BlockParam, ModelConfig, ParamId, ToyTransformer, Trainable};
pub use tape::{ForwardOutput, GradTape, Gradients, Targets};

use crate::error::{Error, Result};
use crate::linalg::{count_above, singular_values, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpectrum {
    /// Singular values of the `N × d` feature matrix, non-increasing.
    pub singular_values: Vec<f64>,
    /// How many exceed `rel_threshold · σ₁`.
    pub above_threshold: usize,
    pub rel_threshold: f64,
}

/// Stacks pooled features for `inputs` and returns their singular values.
pub fn extract_feature_spectrum(
    model: &ToyTransformer,
    inputs: &[Matrix],
    rel_threshold: f64,
) -> Result<FeatureSpectrum> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let features = model.features(inputs)?;
    spectrum_of(&features, rel_threshold)
}

/// Spectrum of an explicit feature matrix.
pub fn spectrum_of(features: &Matrix, rel_threshold: f64) -> Result<FeatureSpectrum> {
    let sv = singular_values(features)?;
    Ok(FeatureSpectrum {
        above_threshold: count_above(&sv, rel_threshold),
        singular_values: sv,
        rel_threshold,
    })
}
