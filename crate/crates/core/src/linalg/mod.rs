//! Dense linear-algebra kernels: matrices, Jacobi SVD, power-iteration
//! spectral norm, stable and effective rank, correlation.

mod matrix;
mod spectral;
mod stats;
mod svd;

pub use matrix::{dot, norm2, Matrix};
pub use spectral::{
    count_above, effective_rank, frobenius_norm, generalization_indicator, spectral_norm, spectral_norm_sq,
    stable_rank, stable_rank_with, PowerIteration, DEFAULT_EFFECTIVE_RANK_THRESHOLD, DEFAULT_POWER_MAX_ITER,
    DEFAULT_POWER_SEED, DEFAULT_POWER_TOL,
};
pub use stats::{median, pearson};
pub use svd::{singular_values, svd, SvdResult, MAX_SVD_DIM};
