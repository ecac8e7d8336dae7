//! Symmetric positive definite solves for the penalized normal equations.
//!
//! The tensor-product systems are block banded: with `vec(B)` ordering, two
//! coefficients couple only when their `t`-indices lie within the support
//! overlap of the `t` basis. The Cholesky factorization below works on the
//! band only, which turns an `O(n^3)` factorization into `O(n w^2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when the first factorization fails.
pub const JITTER_SCALE: f64 = 1e-10;

/// Lower Cholesky factor stored as a band, row by row.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    // row i holds L[i, i-bw ..= i] at offsets 0 ..= bw (padded with zeros on the left)
    rows: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &DMatrix<f64>) -> Option<Self> {
        let bw = lower_bandwidth(a);
        Self::factor_with_bandwidth(a, bw, 0.0)
    }

    fn factor_with_bandwidth(a: &DMatrix<f64>, bw: usize, shift: f64) -> Option<Self> {
        let n = a.nrows();
        let width = bw + 1;
        let mut rows = vec![0.0; n * width];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let start = i.max(j).saturating_sub(bw).max(lo);
                // entries k in [start, j) of rows i and j
                let ri = &rows[i * width..(i + 1) * width];
                let rj = &rows[j * width..(j + 1) * width];
                let off_i = start + bw - i;
                let off_j = start + bw - j;
                let len = j - start;
                let dot: f64 = ri[off_i..off_i + len].iter().zip(&rj[off_j..off_j + len]).map(|(x, y)| x * y).sum();
                let mut v = a[(i, j)] - dot;
                if i == j {
                    v += shift;
                    let scale = a[(i, i)].abs().max(f64::MIN_POSITIVE);
                    if !(v.is_finite() && v > 1e-14 * scale) {
                        return None;
                    }
                    rows[i * width + bw] = v.sqrt();
                } else {
                    rows[i * width + j + bw - i] = v / rows[j * width + bw];
                }
            }
        }
        Some(Self { n, bw, rows })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw, width) = (self.n, self.bw, self.bw + 1);
        let mut y = b.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &self.rows[i * width..(i + 1) * width];
            let mut v = y[i];
            for k in lo..i {
                v -= row[k + bw - i] * y[k];
            }
            y[i] = v / row[bw];
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            let hi = (i + bw + 1).min(n);
            for k in i + 1..hi {
                v -= self.rows[k * width + i + bw - k] * y[k];
            }
            y[i] = v / self.rows[i * width + bw];
        }
        y
    }
}

/// Largest `|i - j|` with a nonzero entry in the lower triangle.
pub fn lower_bandwidth(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut bw = 0;
    for j in 0..n {
        for i in (j + bw + 1..n).rev() {
            if a[(i, j)] != 0.0 {
                bw = i - j;
                break;
            }
        }
    }
    bw
}

/// Solves `a x = b` for symmetric positive definite `a`.
///
/// If the factorization breaks down, `1e-10 * mean(diag(a))` is added to the
/// diagonal once and the factorization retried; a second failure is reported
/// as [`Error::SingularSystem`].
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "system is {}x{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let bw = lower_bandwidth(a);
    if let Some(chol) = BandCholesky::factor_with_bandwidth(a, bw, 0.0) {
        return Ok(chol.solve(b));
    }
    let n = a.nrows().max(1) as f64;
    let jitter = JITTER_SCALE * a.diagonal().iter().sum::<f64>() / n;
    BandCholesky::factor_with_bandwidth(a, bw, jitter)
        .map(|chol| chol.solve(b))
        .ok_or(Error::SingularSystem)
}
