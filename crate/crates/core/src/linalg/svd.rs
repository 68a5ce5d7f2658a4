//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of the taller orientation are orthogonalized pairwise by plane
//! rotations until every pair satisfies `|aₚ·a_q| ≤ tol·‖aₚ‖‖a_q‖`. Singular
//! values are then the column norms and the accumulated rotations form `V`.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Largest dimension accepted by [`svd`].
pub const MAX_SVD_DIM: usize = 4096;

const ROTATION_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Non-increasing, non-negative; length `min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// `rows × min(rows, cols)`, orthonormal columns.
    pub left_vectors: Matrix,
    /// `cols × min(rows, cols)`, orthonormal columns.
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let u = &self.left_vectors;
        let v = &self.right_vectors;
        let scaled = Matrix::from_fn(u.rows(), u.cols(), |i, j| u[(i, j)] * self.singular_values[j]);
        scaled.matmul_nt(v).expect("svd factor shapes agree")
    }
}

fn check_dims(w: &Matrix) -> Result<()> {
    if w.rows() > MAX_SVD_DIM || w.cols() > MAX_SVD_DIM {
        return Err(Error::DimensionTooLarge {
            rows: w.rows(),
            cols: w.cols(),
            bound: MAX_SVD_DIM,
        });
    }
    Ok(())
}

/// Full thin SVD of `w`.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    check_dims(w)?;
    if w.cols() > w.rows() {
        let t = svd_tall(&w.transpose());
        return Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        });
    }
    Ok(svd_tall(w))
}

/// Singular values only (skips accumulating the right vectors).
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    check_dims(w)?;
    let cols = if w.cols() > w.rows() {
        columns_of(&w.transpose())
    } else {
        columns_of(w)
    };
    let (cols, _) = orthogonalize(cols, None);
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn columns_of(w: &Matrix) -> Vec<Vec<f64>> {
    (0..w.cols()).map(|j| w.column(j)).collect()
}

/// Runs Jacobi sweeps on `cols`, applying the same rotations to `v` if given.
fn orthogonalize(mut cols: Vec<Vec<f64>>, mut v: Option<Vec<Vec<f64>>>) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    let n = cols.len();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                if let Some(v) = v.as_mut() {
                    rotate_pair(v, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, v)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn svd_tall(w: &Matrix) -> SvdResult {
    let m = w.rows();
    let n = w.cols();
    let v0: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let (cols, v) = orthogonalize(columns_of(w), Some(v0));
    let v = v.expect("right vectors requested");

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let null_floor = f64::MIN_POSITIVE.sqrt();
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        if s > null_floor {
            singular_values.push(s);
            u_cols.push(Some(cols[j].iter().map(|x| x / s).collect()));
        } else {
            singular_values.push(0.0);
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(m, u_cols);

    let left_vectors = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let right_vectors = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);
    SvdResult {
        singular_values,
        left_vectors,
        right_vectors,
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_axis = 0;
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(c) => out.push(c),
            None => loop {
                assert!(next_axis < m, "ran out of axes while completing basis");
                let mut e = vec![0.0; m];
                e[next_axis] = 1.0;
                next_axis += 1;
                // two passes of Gram-Schmidt
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(&e, b);
                        for (x, y) in e.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_orthonormal_cols(m: &Matrix, tol: f64) {
        let g = m.matmul_tn(m).unwrap();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - expect).abs() < tol, "gram[{i},{j}] = {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn identity_and_diagonal() {
        let r = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(r.singular_values, vec![1.0, 1.0, 1.0]);
        let r = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 2.0, 1.0]);
        assert!(r.reconstruct().sub(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn wide_matrix_and_rank_deficient_completion() {
        let w = Matrix::outer(&[1.0, 2.0, 0.0], &[0.5, -1.0, 0.0, 2.0, 1.0]);
        let r = svd(&w).unwrap();
        assert_eq!(r.left_vectors.shape(), (3, 3));
        assert_eq!(r.right_vectors.shape(), (5, 3));
        assert!(r.singular_values[1] < 1e-12);
        assert_orthonormal_cols(&r.left_vectors, 1e-12);
        assert_orthonormal_cols(&r.right_vectors, 1e-12);
        assert!(r.reconstruct().sub(&w).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let r = svd(&Matrix::zeros(4, 2)).unwrap();
        assert_eq!(r.singular_values, vec![0.0, 0.0]);
        assert_orthonormal_cols(&r.left_vectors, 1e-15);
    }

    #[test]
    fn too_large() {
        let w = Matrix::zeros(1, MAX_SVD_DIM + 1);
        assert!(matches!(svd(&w), Err(Error::DimensionTooLarge { .. })));
        assert!(matches!(singular_values(&w), Err(Error::DimensionTooLarge { .. })));
    }
}
