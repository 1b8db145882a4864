//! Dense row-major `f64` matrices and the kernels shared by the training tape
//! and the forward-only inference path. Every kernel computes each output row
//! independently and in a fixed order, so computing one row alone gives the
//! same bits as computing it inside a larger matrix.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks rows of several matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Matrix { rows: data.len() / cols.max(1), cols, data }
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] * b[n,k]^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    out
}

/// `out[m,n] += a[k,m]^T * b[k,n]`.
pub fn matmul_tn_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(out.shape(), (a.cols, b.cols));
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize; the order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn add_row_broadcast(a: &Matrix, bias: &Matrix) -> Matrix {
    assert_eq!(bias.rows, 1);
    assert_eq!(a.cols, bias.cols);
    let mut out = a.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns the output plus per-row `(mean, inverse std)`.
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Vec<(f64, f64)>) {
    let n = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut stats = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for ((o, &v), (g, b)) in out.row_mut(r).iter_mut().zip(row).zip(gamma.data.iter().zip(&beta.data)) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax over a slice. `-inf` entries get probability zero.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of one row; `-inf` stays `-inf`.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().filter(|x| **x != f64::NEG_INFINITY).map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    v.iter().map(|x| if *x == f64::NEG_INFINITY { f64::NEG_INFINITY } else { x - lse }).collect()
}

/// Multi-head scaled dot-product attention for one query row against the first
/// `n_keys` rows of `k`/`v`. Writes the attended output into `out` and the
/// per-head attention weights into `probs` (`heads * n_keys`).
pub fn attend_row(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    n_keys: usize,
    heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let lo = h * dh;
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(&q[lo..lo + dh], &k.row(j)[lo..lo + dh]) * scale;
        }
        softmax_in_place(p);
        let o = &mut out[lo..lo + dh];
        o.iter_mut().for_each(|x| *x = 0.0);
        for (j, &pj) in p.iter().enumerate() {
            for (x, &vv) in o.iter_mut().zip(&v.row(j)[lo..lo + dh]) {
                *x += pj * vv;
            }
        }
    }
}
