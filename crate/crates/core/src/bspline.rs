//! B-spline bases on clamped knot vectors.
//!
//! A [`BasisSystem`] of order `k` with `M` interior knots spans the splines of
//! degree `k - 1` on the domain and has `M + k` basis functions. Boundary knots
//! are repeated `k` times. Evaluation uses the Cox–de Boor recursion in the
//! triangular form that also yields derivatives, and products of basis
//! functions are integrated exactly with Gauss–Legendre rules per knot span.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Closed interval `[start, end]` with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub start: f64,
    pub end: f64,
}

impl Domain {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(Error::InvalidDomain(start, end));
        }
        Ok(Self { start, end })
    }

    pub fn unit() -> Self {
        Self { start: 0.0, end: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.start && x <= self.end
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { x, lo: self.start, hi: self.end })
        }
    }
}

/// Serializable description of a basis, enough to rebuild it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub order: usize,
    pub interior_knots: usize,
    pub domain: Domain,
}

impl BasisSpec {
    pub fn build(&self) -> Result<BasisSystem> {
        BasisSystem::new(self.order, self.interior_knots, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    order: usize,
    interior_knots: usize,
    domain: Domain,
    knots: Vec<f64>,
}

impl BasisSystem {
    /// Clamped basis with evenly spaced interior knots.
    pub fn new(order: usize, interior_knots: usize, domain: Domain) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidOrder(order));
        }
        let domain = Domain::new(domain.start, domain.end)?;
        let mut knots = Vec::with_capacity(2 * order + interior_knots);
        knots.extend(std::iter::repeat_n(domain.start, order));
        let h = domain.length() / (interior_knots + 1) as f64;
        knots.extend((1..=interior_knots).map(|i| domain.start + i as f64 * h));
        knots.extend(std::iter::repeat_n(domain.end, order));
        Ok(Self { order, interior_knots, domain, knots })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn degree(&self) -> usize {
        self.order - 1
    }

    pub fn interior_knot_count(&self) -> usize {
        self.interior_knots
    }

    pub fn dimension(&self) -> usize {
        self.interior_knots + self.order
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Full clamped knot vector, boundary knots repeated `order` times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Boundary and interior knots without repetition.
    pub fn breakpoints(&self) -> &[f64] {
        &self.knots[self.order - 1..self.knots.len() - self.order + 1]
    }

    pub fn spec(&self) -> BasisSpec {
        BasisSpec { order: self.order, interior_knots: self.interior_knots, domain: self.domain }
    }

    /// Index `s` of the knot span `[knots[s], knots[s+1])` containing `x`.
    /// The right endpoint belongs to the last non-degenerate span.
    fn span(&self, x: f64) -> usize {
        let n = self.dimension();
        if x >= self.knots[n] {
            return n - 1;
        }
        let p = self.degree();
        let (mut lo, mut hi) = (p, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of the `deriv`-th derivative of the `order` basis functions that
    /// are nonzero at `x`; returns the index of the first one.
    ///
    /// No domain checks; `x` must lie in the domain and `deriv < order`.
    pub(crate) fn eval_local(&self, x: f64, deriv: usize, out: &mut [f64]) -> usize {
        let p = self.degree();
        let span = self.span(x);
        let u = &self.knots;
        let k = self.order;
        debug_assert!(out.len() >= k);

        // ndu[j][r]: basis values (lower triangle incl. diagonal) and knot
        // differences (upper triangle) as in the classic triangular scheme.
        let mut ndu = vec![0.0; k * k];
        let idx = |r: usize, c: usize| r * k + c;
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        ndu[idx(0, 0)] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[idx(j, r)] = right[r + 1] + left[j - r];
                let temp = ndu[idx(r, j - 1)] / ndu[idx(j, r)];
                ndu[idx(r, j)] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[idx(j, j)] = saved;
        }

        if deriv == 0 {
            for j in 0..=p {
                out[j] = ndu[idx(j, p)];
            }
            return span - p;
        }

        let mut a = [vec![0.0; k], vec![0.0; k]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0].iter_mut().for_each(|v| *v = 0.0);
            a[0][0] = 1.0;
            let mut d = 0.0;
            for kk in 1..=deriv {
                d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                a[s2].iter_mut().for_each(|v| *v = 0.0);
                if r >= kk {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[idx(pk + 1, rk)];
                    d = a[s2][0] * ndu[idx(rk, pk)];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize) - 1 <= pk as isize { kk - 1 } else { p - r };
                for j in j1..=j2 {
                    let col = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[idx(pk + 1, col)];
                    d += a[s2][j] * ndu[idx(col, pk)];
                }
                if r <= pk {
                    a[s2][kk] = -a[s1][kk - 1] / ndu[idx(pk + 1, r)];
                    d += a[s2][kk] * ndu[idx(r, pk)];
                }
                std::mem::swap(&mut s1, &mut s2);
            }
            out[r] = d;
        }
        // d/dx factors p!/(p-deriv)!
        let factor: f64 = (0..deriv).map(|i| (p - i) as f64).product();
        for v in out.iter_mut().take(k) {
            *v *= factor;
        }
        span - p
    }

    /// All `dimension()` values of the `deriv`-th derivative at `x`.
    pub fn eval(&self, x: f64, deriv: usize) -> Result<Vec<f64>> {
        self.domain.check(x)?;
        self.check_deriv(deriv)?;
        let mut local = vec![0.0; self.order];
        let first = self.eval_local(x, deriv, &mut local);
        let mut out = vec![0.0; self.dimension()];
        out[first..first + self.order].copy_from_slice(&local);
        Ok(out)
    }

    /// Matrix with one row per point holding the `deriv`-th derivatives.
    pub fn eval_matrix(&self, xs: &[f64], deriv: usize) -> Result<DMatrix<f64>> {
        self.check_deriv(deriv)?;
        let mut m = DMatrix::zeros(xs.len(), self.dimension());
        let mut local = vec![0.0; self.order];
        for (row, &x) in xs.iter().enumerate() {
            self.domain.check(x)?;
            let first = self.eval_local(x, deriv, &mut local);
            for (j, v) in local.iter().enumerate() {
                m[(row, first + j)] = *v;
            }
        }
        Ok(m)
    }

    fn check_deriv(&self, deriv: usize) -> Result<()> {
        if deriv >= self.order {
            Err(Error::UnsupportedDerivative { deriv, order: self.order })
        } else {
            Ok(())
        }
    }
}

/// Breakpoints `tau_0 < ... < tau_{L+1}` partitioning a domain into cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubIntervalGrid {
    breakpoints: Vec<f64>,
}

impl SubIntervalGrid {
    pub fn new(breakpoints: Vec<f64>, domain: Domain) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidGrid("need at least two breakpoints".into()));
        }
        if breakpoints[0] != domain.start || *breakpoints.last().unwrap() != domain.end {
            return Err(Error::InvalidGrid(format!(
                "breakpoints must start at {} and end at {}",
                domain.start, domain.end
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidGrid("breakpoints must be strictly increasing".into()));
        }
        Ok(Self { breakpoints })
    }

    /// `interior` evenly spaced breakpoints plus the two domain ends.
    pub fn uniform(domain: Domain, interior: usize) -> Self {
        let h = domain.length() / (interior + 1) as f64;
        let mut breakpoints: Vec<f64> = (0..=interior + 1).map(|i| domain.start + i as f64 * h).collect();
        breakpoints[interior + 1] = domain.end;
        Self { breakpoints }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Number of interior breakpoints (`L`).
    pub fn interior_count(&self) -> usize {
        self.breakpoints.len() - 2
    }

    /// Number of cells (`L + 1`).
    pub fn cell_count(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// `(left, right)` ends of cell `i` (0-based).
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.breakpoints[i], self.breakpoints[i + 1])
    }

    /// Right endpoints of the cells, where piecewise-constant weights are sampled.
    pub fn right_endpoints(&self) -> &[f64] {
        &self.breakpoints[1..]
    }

    pub fn mesh_width(&self) -> f64 {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// `(p, q)` entry is the integral over `[c, d]` of the `deriv_a`-th derivative
/// of basis function `p` of `a` times the `deriv_b`-th derivative of basis
/// function `q` of `b`. Exact up to rounding: each span between consecutive
/// knots of either basis is integrated with a Gauss–Legendre rule of
/// sufficient degree.
pub fn product_integral(
    a: &BasisSystem,
    deriv_a: usize,
    b: &BasisSystem,
    deriv_b: usize,
    c: f64,
    d: f64,
) -> Result<DMatrix<f64>> {
    a.check_deriv(deriv_a)?;
    b.check_deriv(deriv_b)?;
    for basis in [a, b] {
        basis.domain.check(c)?;
        basis.domain.check(d)?;
    }
    if c > d {
        return Err(Error::InvalidGrid(format!("integration interval [{c}, {d}] is reversed")));
    }
    let mut out = DMatrix::zeros(a.dimension(), b.dimension());
    if c == d {
        return Ok(out);
    }

    let mut cuts: Vec<f64> = vec![c, d];
    cuts.extend(a.breakpoints().iter().chain(b.breakpoints()).copied().filter(|&x| x > c && x < d));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let n_nodes = (a.order + b.order).div_ceil(2).max(1);
    let (nodes, weights) = gauss_legendre(n_nodes);
    let mut va = vec![0.0; a.order];
    let mut vb = vec![0.0; b.order];
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (z, w) in nodes.iter().zip(&weights) {
            let x = mid + half * z;
            let fa = a.eval_local(x, deriv_a, &mut va);
            let fb = b.eval_local(x, deriv_b, &mut vb);
            let wx = w * half;
            for (i, ai) in va.iter().enumerate() {
                let s = wx * ai;
                if s == 0.0 {
                    continue;
                }
                for (j, bj) in vb.iter().enumerate() {
                    out[(fa + i, fb + j)] += s * bj;
                }
            }
        }
    }
    Ok(out)
}

/// Gram-type matrix of a single basis over `[c, d]`.
pub fn gram(basis: &BasisSystem, deriv: usize, c: f64, d: f64) -> Result<DMatrix<f64>> {
    product_integral(basis, deriv, basis, deriv, c, d)
}
