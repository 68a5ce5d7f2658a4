#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srlora::linalg::Matrix;
use srlora::nn::{Gradients, ParamId, Targets, ToyTransformer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, &mut rng(seed))
}

pub fn seeded_inputs(n: usize, seq: usize, dim: usize, seed: u64) -> Vec<Matrix> {
    let mut r = rng(seed);
    (0..n).map(|_| Matrix::random_normal(seq, dim, &mut r)).collect()
}

#[derive(Debug, Default)]
pub struct FdSummary {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_abs_err: f64,
}

/// Central finite differences of the batch loss for every entry of `ids`,
/// compared against `grads` (a missing gradient counts as zero).
pub fn finite_difference_check(
    model: &mut ToyTransformer,
    inputs: &[Matrix],
    targets: &Targets,
    grads: &Gradients,
    ids: &[ParamId],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> FdSummary {
    let mut summary = FdSummary::default();
    for &id in ids {
        let (rows, cols) = model.param(id).expect("param exists").shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.param(id).unwrap()[(i, j)];
                model.param_mut(id).unwrap()[(i, j)] = orig + step;
                let (lp, _) = model.forward_loss(inputs, targets).unwrap();
                model.param_mut(id).unwrap()[(i, j)] = orig - step;
                let (lm, _) = model.forward_loss(inputs, targets).unwrap();
                model.param_mut(id).unwrap()[(i, j)] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let g = grads.get(&id).map(|m| m[(i, j)]).unwrap_or(0.0);
                let err = (g - fd).abs();
                summary.checked += 1;
                summary.max_abs_err = summary.max_abs_err.max(err);
                if err > abs_tol && err > rel_tol * g.abs().max(fd.abs()) {
                    summary
                        .failures
                        .push(format!("{id}[{i},{j}]: analytic {g:e} vs fd {fd:e}"));
                }
            }
        }
    }
    summary
}

/// Orthonormal `n × n` matrix by modified Gram-Schmidt over Gaussian columns.
pub fn orthogonal(n: usize, seed: u64) -> Matrix {
    let g = seeded_matrix(n, n, seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = g.column(j);
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

/// `U · diag(sigma) · Vᵀ` with seeded orthogonal factors.
pub fn with_spectrum(sigma: &[f64], seed: u64) -> Matrix {
    let n = sigma.len();
    let u = orthogonal(n, seed);
    let v = orthogonal(n, seed.wrapping_add(7919));
    let us = Matrix::from_fn(n, n, |i, j| u[(i, j)] * sigma[j]);
    us.matmul_nt(&v).unwrap()
}
