//! Norms and rank measures built on top of power iteration and the Jacobi SVD.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{dot, Matrix};
use super::svd::singular_values;
use crate::error::{Error, Result};

pub const DEFAULT_POWER_TOL: f64 = 1e-12;
pub const DEFAULT_POWER_MAX_ITER: usize = 10_000;
pub const DEFAULT_POWER_SEED: u64 = 0x5eed_0001;
/// Relative threshold used by [`effective_rank`] callers when none is given.
pub const DEFAULT_EFFECTIVE_RANK_THRESHOLD: f64 = 1e-6;

/// Settings for [`spectral_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: DEFAULT_POWER_TOL,
            max_iter: DEFAULT_POWER_MAX_ITER,
            seed: DEFAULT_POWER_SEED,
        }
    }
}

pub fn frobenius_norm(w: &Matrix) -> f64 {
    w.frobenius_sq().sqrt()
}

/// σ₁ of `w` by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Matrix, opts: &PowerIteration) -> Result<f64> {
    spectral_norm_sq(w, opts).map(f64::sqrt)
}

/// σ₁² of `w`, returned without a square root so `‖W‖_F²/σ₁²` stays exact
/// in trivially converged cases such as the identity.
pub fn spectral_norm_sq(w: &Matrix, opts: &PowerIteration) -> Result<f64> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidArgument(format!(
            "power iteration needs tol > 0 and max_iter >= 1 (got {}, {})",
            opts.tol, opts.max_iter
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<f64> = (0..w.cols()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut estimate = f64::NAN;
    for iter in 1..=opts.max_iter {
        let wx = w.matvec(&x);
        let xx = dot(&x, &x);
        let next = dot(&wx, &wx) / xx;
        if next == 0.0 {
            return Ok(0.0);
        }
        if iter > 1 && ((next - estimate) / next).abs() < opts.tol {
            return Ok(next);
        }
        estimate = next;
        let y = w.matvec_t(&wx);
        let ny = dot(&y, &y).sqrt();
        x = y.into_iter().map(|v| v / ny).collect();
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        estimate: estimate.sqrt(),
    })
}

/// Power iteration with a single reseeded restart on non-convergence.
fn spectral_norm_sq_with_restart(w: &Matrix, opts: &PowerIteration) -> Result<f64> {
    match spectral_norm_sq(w, opts) {
        Err(Error::NonConvergence { .. }) => {
            let retry = PowerIteration {
                seed: opts.seed ^ 0x9e37_79b9_7f4a_7c15,
                ..*opts
            };
            spectral_norm_sq(w, &retry)
        }
        other => other,
    }
}

/// `‖W‖_F² / ‖W‖₂²` with default power-iteration settings.
pub fn stable_rank(w: &Matrix) -> Result<f64> {
    stable_rank_with(w, &PowerIteration::default())
}

pub fn stable_rank_with(w: &Matrix, opts: &PowerIteration) -> Result<f64> {
    let fro_sq = w.frobenius_sq();
    if fro_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let spec_sq = spectral_norm_sq_with_restart(w, opts)?;
    Ok(fro_sq / spec_sq)
}

/// Number of singular values strictly above `rel_threshold · σ₁`.
pub fn effective_rank(w: &Matrix, rel_threshold: f64) -> Result<usize> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "effective-rank threshold must lie in (0, 1), got {rel_threshold}"
        )));
    }
    Ok(count_above(&singular_values(w)?, rel_threshold))
}

/// Counts entries of a non-increasing spectrum above `rel_threshold` times its head.
pub fn count_above(spectrum: &[f64], rel_threshold: f64) -> usize {
    match spectrum.first() {
        Some(&s1) if s1 > 0.0 => spectrum.iter().filter(|&&s| s > rel_threshold * s1).count(),
        _ => 0,
    }
}

/// `√(∏ᵢ‖Wᵢ‖₂²) · Σᵢ srank(Wᵢ)`.
pub fn generalization_indicator(weights: &[Matrix]) -> Result<f64> {
    let opts = PowerIteration::default();
    let mut log_lipschitz = 0.0;
    let mut srank_sum = 0.0;
    for w in weights {
        let fro_sq = w.frobenius_sq();
        if fro_sq == 0.0 {
            return Err(Error::ZeroMatrix);
        }
        let spec_sq = spectral_norm_sq_with_restart(w, &opts)?;
        log_lipschitz += 0.5 * spec_sq.ln();
        srank_sum += fro_sq / spec_sq;
    }
    Ok(log_lipschitz.exp() * srank_sum)
}
