//! Low-rank adapter pairs `ΔW = B·A` with stochastic partial updating.
//!
//! `B` is `d × r` and starts at zero, `A` is `r × k` and starts i.i.d. N(0, 1),
//! so a fresh adapter leaves the wrapped weight untouched. No `α/r` scaling
//! is applied to the update.
//!
//! Under stochastic partial updating (SPU) each training iteration draws an
//! active rank `s`; only the leading `s` columns of `B` and leading `s` rows of
//! `A` take part in the forward pass and receive updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    d: usize,
    k: usize,
    rank: usize,
    b_factor: Matrix,
    a_factor: Matrix,
    spu_enabled: bool,
    active_rank: usize,
}

/// Region of a tensor that an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMask {
    All,
    LeadingCols(usize),
    LeadingRows(usize),
}

impl UpdateMask {
    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        match *self {
            UpdateMask::All => true,
            UpdateMask::LeadingCols(n) => col < n,
            UpdateMask::LeadingRows(n) => row < n,
        }
    }
}

pub fn init_adapter(d: usize, k: usize, rank: usize, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::RankTooLarge { d, k, rank });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter {
        d,
        k,
        rank,
        b_factor: Matrix::zeros(d, rank),
        a_factor: Matrix::random_normal(rank, k, &mut rng),
        spu_enabled: false,
        active_rank: rank,
    })
}

/// `d·r + r·k`.
pub fn trainable_params(d: usize, k: usize, rank: usize) -> usize {
    d * rank + rank * k
}

impl LoraAdapter {
    /// Assembles an adapter from existing factors (e.g. loaded from a bundle).
    pub fn from_factors(b_factor: Matrix, a_factor: Matrix) -> Result<Self> {
        let (d, rank) = b_factor.shape();
        let (ra, k) = a_factor.shape();
        if ra != rank {
            return Err(Error::ShapeMismatch(format!(
                "adapter factors B {d}x{rank} and A {ra}x{k} disagree on rank"
            )));
        }
        if rank > d.min(k) {
            return Err(Error::RankTooLarge { d, k, rank });
        }
        Ok(Self {
            d,
            k,
            rank,
            b_factor,
            a_factor,
            spu_enabled: false,
            active_rank: rank,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn active_rank(&self) -> usize {
        self.active_rank
    }

    pub fn spu_enabled(&self) -> bool {
        self.spu_enabled
    }

    pub fn b_factor(&self) -> &Matrix {
        &self.b_factor
    }

    pub fn a_factor(&self) -> &Matrix {
        &self.a_factor
    }

    pub fn b_factor_mut(&mut self) -> &mut Matrix {
        &mut self.b_factor
    }

    pub fn a_factor_mut(&mut self) -> &mut Matrix {
        &mut self.a_factor
    }

    /// Turning SPU off restores the full rank.
    pub fn set_spu(&mut self, enabled: bool) {
        self.spu_enabled = enabled;
        if !enabled {
            self.active_rank = self.rank;
        }
    }

    /// Sets the active rank directly. `0` is only meaningful with zero-inclusive sampling.
    pub fn set_active_rank(&mut self, active: usize) -> Result<()> {
        if active > self.rank {
            return Err(Error::InvalidArgument(format!(
                "active rank {active} exceeds adapter rank {}",
                self.rank
            )));
        }
        self.active_rank = active;
        Ok(())
    }

    /// Leading `active_rank` columns of `B`.
    pub fn active_b(&self) -> Matrix {
        self.b_factor.leading_cols(self.active_rank)
    }

    /// Leading `active_rank` rows of `A`.
    pub fn active_a(&self) -> Matrix {
        self.a_factor.leading_rows(self.active_rank)
    }

    pub fn b_mask(&self) -> UpdateMask {
        if self.active_rank == self.rank {
            UpdateMask::All
        } else {
            UpdateMask::LeadingCols(self.active_rank)
        }
    }

    pub fn a_mask(&self) -> UpdateMask {
        if self.active_rank == self.rank {
            UpdateMask::All
        } else {
            UpdateMask::LeadingRows(self.active_rank)
        }
    }

    /// `B[:, :s] · A[:s, :]` for the current active rank `s`.
    pub fn delta(&self) -> Matrix {
        if self.active_rank == 0 {
            return Matrix::zeros(self.d, self.k);
        }
        self.active_b()
            .matmul(&self.active_a())
            .expect("adapter factor shapes agree")
    }

    /// Full-rank `B · A`, independent of the SPU state.
    pub fn full_delta(&self) -> Matrix {
        self.b_factor
            .matmul(&self.a_factor)
            .expect("adapter factor shapes agree")
    }

    /// `(W₀ + ΔW)·x`, evaluated as `W₀·x + B_s·(A_s·x)`.
    pub fn apply_adapted(&self, w0: &Matrix, x: &Matrix) -> Result<Matrix> {
        if w0.shape() != (self.d, self.k) {
            return Err(Error::ShapeMismatch(format!(
                "base weight is {}x{}, adapter expects {}x{}",
                w0.rows(),
                w0.cols(),
                self.d,
                self.k
            )));
        }
        let mut out = w0.matmul(x)?;
        if self.active_rank > 0 {
            let ax = self.active_a().matmul(x)?;
            out.add_assign(&self.active_b().matmul(&ax)?)?;
        }
        Ok(out)
    }

    /// `W₀ + B·A` at full rank.
    pub fn merge(&self, w0: &Matrix) -> Result<Matrix> {
        if w0.shape() != (self.d, self.k) {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}x{} adapter into {}x{} weight",
                self.d,
                self.k,
                w0.rows(),
                w0.cols()
            )));
        }
        w0.add(&self.full_delta())
    }

    pub fn num_params(&self) -> usize {
        trainable_params(self.d, self.k, self.rank)
    }
}

/// Seeded stream of active-rank draws.
#[derive(Debug, Clone)]
pub struct SpuSampler {
    rng: ChaCha8Rng,
    include_zero: bool,
}

impl SpuSampler {
    pub fn new(seed: u64) -> Self {
        Self::with_zero(seed, false)
    }

    /// When `include_zero` is set, draws cover `{0, …, r}` instead of `{1, …, r}`.
    pub fn with_zero(seed: u64, include_zero: bool) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            include_zero,
        }
    }

    pub fn draw(&mut self, max_rank: usize) -> usize {
        let lo = if self.include_zero { 0 } else { 1 };
        self.rng.random_range(lo..=max_rank)
    }
}

/// Draws a new active rank for `adapter` and stores it.
pub fn sample_active_rank(sampler: &mut SpuSampler, adapter: &mut LoraAdapter) -> Result<usize> {
    if !adapter.spu_enabled {
        return Err(Error::SpuDisabled);
    }
    let s = sampler.draw(adapter.rank);
    adapter.active_rank = s;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fresh_adapter_is_transparent() {
        let a = init_adapter(4, 4, 2, 7).unwrap();
        assert!(a.delta().is_zero());
        assert_eq!(a.delta().shape(), (4, 4));
        let w0 = seeded(4, 4, 1);
        let x = seeded(4, 3, 2);
        assert_eq!(a.apply_adapted(&w0, &x).unwrap(), w0.matmul(&x).unwrap());
        assert_eq!(a.merge(&w0).unwrap(), w0);
    }

    #[test]
    fn rank_bounds() {
        assert!(matches!(init_adapter(3, 5, 5, 0), Err(Error::RankTooLarge { .. })));
        assert!(matches!(init_adapter(3, 5, 0, 0), Err(Error::RankTooLarge { .. })));
        assert!(init_adapter(3, 5, 3, 0).is_ok());
    }

    #[test]
    fn gaussian_init_follows_reference_stream() {
        use rand_distr::{Distribution, StandardNormal};
        let a = init_adapter(8, 8, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(a.a_factor().as_slice(), reference.as_slice());

        // 32 draws are too few for a tight moment band; check it on 2048.
        let a = init_adapter(64, 64, 32, 1).unwrap();
        let v = a.a_factor().as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.2, "mean {mean}");
        assert!((var - 1.0).abs() < 0.3, "var {var}");
    }

    #[test]
    fn truncated_delta_matches_sliced_product() {
        let b = seeded(5, 3, 3);
        let a = seeded(3, 4, 4);
        let mut ad = LoraAdapter::from_factors(b.clone(), a.clone()).unwrap();
        assert_eq!(ad.delta(), b.matmul(&a).unwrap());
        ad.set_active_rank(2).unwrap();
        let expect = Matrix::from_fn(5, 4, |i, j| (0..2).map(|p| b[(i, p)] * a[(p, j)]).sum());
        assert!(ad.delta().sub(&expect).unwrap().max_abs() < 1e-14);
        // merge ignores the active rank
        assert_eq!(ad.merge(&Matrix::zeros(5, 4)).unwrap(), b.matmul(&a).unwrap());
        ad.set_active_rank(0).unwrap();
        assert!(ad.delta().is_zero());
        assert!(ad.set_active_rank(4).is_err());
    }

    #[test]
    fn apply_identity_input_gives_adapted_weight() {
        let mut ad = LoraAdapter::from_factors(seeded(4, 2, 5), seeded(2, 4, 6)).unwrap();
        ad.set_spu(true);
        ad.set_active_rank(1).unwrap();
        let w0 = seeded(4, 4, 7);
        let out = ad.apply_adapted(&w0, &Matrix::identity(4)).unwrap();
        let expect = w0.add(&ad.delta()).unwrap();
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-14);
        assert!(ad.apply_adapted(&seeded(3, 4, 8), &Matrix::identity(4)).is_err());
        assert!(ad.merge(&seeded(4, 3, 8)).is_err());
    }

    #[test]
    fn sampler_requires_spu_and_is_deterministic() {
        let mut ad = init_adapter(6, 6, 1, 0).unwrap();
        let mut s = SpuSampler::new(11);
        assert!(matches!(sample_active_rank(&mut s, &mut ad), Err(Error::SpuDisabled)));
        ad.set_spu(true);
        for _ in 0..50 {
            assert_eq!(sample_active_rank(&mut s, &mut ad).unwrap(), 1);
        }
        let mut s1 = SpuSampler::new(99);
        let mut s2 = s1.clone();
        let a: Vec<_> = (0..100).map(|_| s1.draw(8)).collect();
        let b: Vec<_> = (0..100).map(|_| s2.draw(8)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (1..=8).contains(&v)));
    }

    #[test]
    fn zero_inclusive_sampling_reaches_zero() {
        let mut s = SpuSampler::with_zero(5, true);
        let draws: Vec<_> = (0..200).map(|_| s.draw(3)).collect();
        assert!(draws.contains(&0));
        assert!(draws.iter().all(|&v| v <= 3));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(trainable_params(768, 768, 8), 12_288);
        assert_eq!(trainable_params(768, 768, 256), 393_216);
        assert_eq!(trainable_params(10, 20, 0), 0);
    }

    #[test]
    fn masks_follow_active_rank() {
        let mut ad = init_adapter(4, 4, 3, 0).unwrap();
        assert_eq!(ad.b_mask(), UpdateMask::All);
        ad.set_active_rank(2).unwrap();
        assert_eq!(ad.b_mask(), UpdateMask::LeadingCols(2));
        assert_eq!(ad.a_mask(), UpdateMask::LeadingRows(2));
        assert!(UpdateMask::LeadingCols(2).allows(3, 1));
        assert!(!UpdateMask::LeadingCols(2).allows(0, 2));
        assert!(!UpdateMask::LeadingRows(2).allows(2, 0));
    }
}
