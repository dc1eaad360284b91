//! Soft dynamic time warping under squared Euclidean cost.
//!
//! `R[i][j] = cost[i][j] + softmin_g(R[i-1][j], R[i][j-1], R[i-1][j-1])` with
//! `softmin_g(a..) = -g ln sum exp(-a/g)`. The backward pass runs the reverse
//! recursion over soft alignment weights, giving `d R[m][n] / d cost`.

use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

/// `cost[i][j] = |x_i - y_j|^2` for row sequences `x` (`m x d`) and `y` (`n x d`).
pub fn sq_euclidean_cost(x: &DenseArray, y: &DenseArray) -> Result<DenseArray> {
    if x.cols() != y.cols() {
        return Err(Error::dim("soft_dtw cost", x.shape(), y.shape()));
    }
    let (m, n) = (x.rows(), y.rows());
    let mut out = DenseArray::zeros(&[m, n]);
    for i in 0..m {
        let xi = x.row(i);
        for j in 0..n {
            let d: f64 = xi.iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(i, j, d);
        }
    }
    Ok(out)
}

/// `-gamma ln (e^{-a/gamma} + e^{-b/gamma} + e^{-c/gamma})`, stabilized by the minimum.
pub fn softmin3(a: f64, b: f64, c: f64, gamma: f64) -> f64 {
    let lo = a.min(b).min(c);
    if lo == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = (-(a - lo) / gamma).exp() + (-(b - lo) / gamma).exp() + (-(c - lo) / gamma).exp();
    lo - gamma * s.ln()
}

fn check_inputs(cost: &DenseArray, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Argument(format!("soft-DTW smoothing must be positive, got {gamma}")));
    }
    if cost.rows() == 0 || cost.cols() == 0 {
        return Err(Error::Argument("soft-DTW needs non-empty sequences".into()));
    }
    Ok(())
}

/// Forward DP table of shape `(m+1) x (n+1)`; the distance is entry `(m, n)`.
pub fn soft_dtw_table(cost: &DenseArray, gamma: f64) -> Result<DenseArray> {
    check_inputs(cost, gamma)?;
    let (m, n) = (cost.rows(), cost.cols());
    let w = n + 1;
    let mut r = vec![f64::INFINITY; (m + 1) * w];
    r[0] = 0.0;
    for i in 1..=m {
        for j in 1..=n {
            let soft = softmin3(r[(i - 1) * w + j], r[i * w + j - 1], r[(i - 1) * w + j - 1], gamma);
            r[i * w + j] = cost.get(i - 1, j - 1) + soft;
        }
    }
    DenseArray::matrix(m + 1, w, r)
}

/// Expected alignment matrix `E = d R[m][n] / d cost` (`m x n`).
pub fn soft_dtw_backward(cost: &DenseArray, table: &DenseArray, gamma: f64) -> DenseArray {
    let (m, n) = (cost.rows(), cost.cols());
    let w = n + 2;
    let at = |i: usize, j: usize| i * w + j;
    let mut r = vec![f64::NEG_INFINITY; (m + 2) * w];
    let mut d = vec![0.0; (m + 2) * w];
    for i in 1..=m {
        for j in 1..=n {
            r[at(i, j)] = table.get(i, j);
            d[at(i, j)] = cost.get(i - 1, j - 1);
        }
    }
    r[at(m + 1, n + 1)] = table.get(m, n);
    let mut e = vec![0.0; (m + 2) * w];
    e[at(m + 1, n + 1)] = 1.0;
    for i in (1..=m).rev() {
        for j in (1..=n).rev() {
            let here = r[at(i, j)];
            let a = ((r[at(i + 1, j)] - here - d[at(i + 1, j)]) / gamma).exp();
            let b = ((r[at(i, j + 1)] - here - d[at(i, j + 1)]) / gamma).exp();
            let c = ((r[at(i + 1, j + 1)] - here - d[at(i + 1, j + 1)]) / gamma).exp();
            e[at(i, j)] = e[at(i + 1, j)] * a + e[at(i, j + 1)] * b + e[at(i + 1, j + 1)] * c;
        }
    }
    let mut out = DenseArray::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            out.set(i, j, e[at(i + 1, j + 1)]);
        }
    }
    out
}

/// Soft-DTW distance between two row sequences.
pub fn softdtw(x: &DenseArray, y: &DenseArray, gamma: f64) -> Result<f64> {
    let cost = sq_euclidean_cost(x, y)?;
    let table = soft_dtw_table(&cost, gamma)?;
    Ok(table.get(cost.rows(), cost.cols()))
}

/// Classic DTW (hard minimum) under squared Euclidean cost.
pub fn hard_dtw(x: &DenseArray, y: &DenseArray) -> Result<f64> {
    let cost = sq_euclidean_cost(x, y)?;
    let (m, n) = (cost.rows(), cost.cols());
    if m == 0 || n == 0 {
        return Err(Error::Argument("DTW needs non-empty sequences".into()));
    }
    let w = n + 1;
    let mut r = vec![f64::INFINITY; (m + 1) * w];
    r[0] = 0.0;
    for i in 1..=m {
        for j in 1..=n {
            let best = r[(i - 1) * w + j].min(r[i * w + j - 1]).min(r[(i - 1) * w + j - 1]);
            r[i * w + j] = cost.get(i - 1, j - 1) + best;
        }
    }
    Ok(r[m * w + n])
}
