//! Row-wise kernels and their adjoints.

use crate::linalg::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Layer norm over each row with gain `g` and bias `b`.
pub(crate) fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f64;
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let h = (r[j] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dg`, `db`.
pub(crate) fn layer_norm_backward(dy: &Matrix, g: &[f64], cache: &LnCache, dg: &mut [f64], db: &mut [f64]) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..cols {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..cols {
            out[j] = is / n * (n * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
    dx
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Softmax of each row in place.
pub(crate) fn softmax_rows(s: &mut Matrix) {
    for i in 0..s.rows() {
        let r = s.row_mut(i);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in r.iter_mut() {
            *v /= z;
        }
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Columns `[start, start + width)` of `m`.
pub(crate) fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |i, j| m[(i, start + j)])
}

pub(crate) fn set_col_block(m: &mut Matrix, start: usize, block: &Matrix) {
    for i in 0..block.rows() {
        for j in 0..block.cols() {
            m[(i, start + j)] = block[(i, j)];
        }
    }
}
