//! Smoothing spline (SMOOTH) and adaptive smoothing spline (AdaSS) estimators
//! of the coefficient surface, prediction, and the ISE / PMSE metrics.
//!
//! Coefficient matrices `B` are `dim_s x dim_t` and are vectorized column by
//! column, so `vec(B)[i + dim_s * j] = B[i, j]`. With that ordering the data
//! term is `vec(B)^T (W_t kron X^T X) vec(B)` and the penalty is a weighted sum
//! of `W_{t,j} kron R_{s,i}` and `R_{t,j} kron W_{s,i}` blocks, one pair per
//! rectangle of the breakpoint grids.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::{gram, BasisSpec, BasisSystem, SubIntervalGrid};
use crate::error::{Error, Result};
use crate::fdata::{check_same_domain, project, DesignMatrices, FunctionalSample};
use crate::linalg::solve_spd;
use crate::quadrature::{linspace, trapezoid, trapezoid_weights};

/// Default number of points per axis for ISE quadrature.
pub const ISE_GRID_POINTS: usize = 201;

/// Orders `(m_s, m_t)` of the differential operators in the penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivOrders {
    pub s: usize,
    pub t: usize,
}

impl Default for DerivOrders {
    fn default() -> Self {
        Self { s: 2, t: 2 }
    }
}

/// Estimated coefficient surface `beta(s, t) = psi_s(s)^T B psi_t(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSurface {
    coefs: DMatrix<f64>,
    basis_s: BasisSystem,
    basis_t: BasisSystem,
}

/// On-disk form of a [`CoefficientSurface`]; coefficients are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub basis_s: BasisSpec,
    pub basis_t: BasisSpec,
    pub rows: usize,
    pub cols: usize,
    pub coefficients: Vec<f64>,
}

impl CoefficientSurface {
    pub fn new(coefs: DMatrix<f64>, basis_s: BasisSystem, basis_t: BasisSystem) -> Result<Self> {
        if coefs.nrows() != basis_s.dimension() || coefs.ncols() != basis_t.dimension() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient matrix is {}x{} but the bases have dimensions {} and {}",
                coefs.nrows(),
                coefs.ncols(),
                basis_s.dimension(),
                basis_t.dimension()
            )));
        }
        if coefs.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(Self { coefs, basis_s, basis_t })
    }

    pub fn zeros(basis_s: BasisSystem, basis_t: BasisSystem) -> Self {
        let coefs = DMatrix::zeros(basis_s.dimension(), basis_t.dimension());
        Self { coefs, basis_s, basis_t }
    }

    pub fn coefs(&self) -> &DMatrix<f64> {
        &self.coefs
    }

    pub fn basis_s(&self) -> &BasisSystem {
        &self.basis_s
    }

    pub fn basis_t(&self) -> &BasisSystem {
        &self.basis_t
    }

    /// `d^ds/ds^ds d^dt/dt^dt beta(s, t)`.
    pub fn eval_partial(&self, s: f64, t: f64, ds: usize, dt: usize) -> Result<f64> {
        let ps = DVector::from_vec(self.basis_s.eval(s, ds)?);
        let pt = DVector::from_vec(self.basis_t.eval(t, dt)?);
        Ok(ps.dot(&(&self.coefs * pt)))
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        self.eval_partial(s, t, 0, 0)
    }

    /// Values on the tensor grid, `ss.len() x ts.len()`.
    pub fn eval_grid(&self, ss: &[f64], ts: &[f64], ds: usize, dt: usize) -> Result<DMatrix<f64>> {
        let ps = self.basis_s.eval_matrix(ss, ds)?;
        let pt = self.basis_t.eval_matrix(ts, dt)?;
        Ok(ps * &self.coefs * pt.transpose())
    }

    pub fn to_record(&self) -> SurfaceRecord {
        let (rows, cols) = self.coefs.shape();
        let coefficients = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|ij| self.coefs[ij]).collect();
        SurfaceRecord { basis_s: self.basis_s.spec(), basis_t: self.basis_t.spec(), rows, cols, coefficients }
    }

    pub fn from_record(record: &SurfaceRecord) -> Result<Self> {
        if record.coefficients.len() != record.rows * record.cols {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a {}x{} matrix",
                record.coefficients.len(),
                record.rows,
                record.cols
            )));
        }
        let coefs = DMatrix::from_row_slice(record.rows, record.cols, &record.coefficients);
        Self::new(coefs, record.basis_s.build()?, record.basis_t.build()?)
    }

    /// Writes `beta(s, t)` for each requested `t` over `s_grid` as long-format
    /// CSV with columns `t,s,beta`.
    pub fn write_slices_csv(&self, path: impl AsRef<Path>, s_grid: &[f64], t_values: &[f64]) -> Result<()> {
        let values = self.eval_grid(s_grid, t_values, 0, 0)?;
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["t", "s", "beta"])?;
        for (j, t) in t_values.iter().enumerate() {
            for (i, s) in s_grid.iter().enumerate() {
                w.write_record([t.to_string(), s.to_string(), values[(i, j)].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One combination of the six adaptive tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub lambda_s: f64,
    pub delta_star_s: f64,
    pub gamma_s: f64,
    pub lambda_t: f64,
    pub delta_star_t: f64,
    pub gamma_t: f64,
    pub cv_error: Option<f64>,
}

impl TuningPoint {
    pub const DIM: usize = 6;

    /// Non-adaptive point: unit weights everywhere.
    pub fn smooth(lambda_s: f64, lambda_t: f64) -> Self {
        Self { lambda_s, delta_star_s: 0.0, gamma_s: 0.0, lambda_t, delta_star_t: 0.0, gamma_t: 0.0, cv_error: None }
    }

    /// Parameters in the order `lambda_s, delta*_s, gamma_s, lambda_t, delta*_t, gamma_t`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.lambda_s, self.delta_star_s, self.gamma_s, self.lambda_t, self.delta_star_t, self.gamma_t]
    }

    pub fn from_array(p: &[f64]) -> Self {
        Self {
            lambda_s: p[0],
            delta_star_s: p[1],
            gamma_s: p[2],
            lambda_t: p[3],
            delta_star_t: p[4],
            gamma_t: p[5],
            cv_error: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.to_array();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("tuning parameters must be finite and nonnegative: {p:?}")));
        }
        if self.lambda_s <= 0.0 || self.lambda_t <= 0.0 {
            return Err(Error::InvalidConfig("roughness parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Pilot estimates of `D_s^{m_s} beta` and `D_t^{m_t} beta` sampled at the
/// right/top corner of every rectangle of the breakpoint grids.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimates {
    /// `(L_s + 1) x (L_t + 1)`.
    pub d_s: DMatrix<f64>,
    pub d_t: DMatrix<f64>,
}

/// Pilot derivative estimates from a fitted surface.
pub fn initial_derivatives(
    surface: &CoefficientSurface,
    orders: DerivOrders,
    grid_s: &SubIntervalGrid,
    grid_t: &SubIntervalGrid,
) -> Result<DerivativeEstimates> {
    let ss = grid_s.right_endpoints();
    let ts = grid_t.right_endpoints();
    Ok(DerivativeEstimates {
        d_s: surface.eval_grid(ss, ts, orders.s, 0)?,
        d_t: surface.eval_grid(ss, ts, 0, orders.t)?,
    })
}

impl DerivativeEstimates {
    /// Pilot estimates from closed-form partial derivatives.
    pub fn from_fn(
        grid_s: &SubIntervalGrid,
        grid_t: &SubIntervalGrid,
        d_s: impl Fn(f64, f64) -> f64,
        d_t: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let ss = grid_s.right_endpoints();
        let ts = grid_t.right_endpoints();
        Self {
            d_s: DMatrix::from_fn(ss.len(), ts.len(), |i, j| d_s(ss[i], ts[j])),
            d_t: DMatrix::from_fn(ss.len(), ts.len(), |i, j| d_t(ss[i], ts[j])),
        }
    }

    /// Weight grids `(|d| + delta)^(-gamma)` with `delta = delta* max|d|`.
    pub fn weights(&self, tuning: &TuningPoint) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let ws = adaptive_weights(&self.d_s, tuning.delta_star_s, tuning.gamma_s, "s")?;
        let wt = adaptive_weights(&self.d_t, tuning.delta_star_t, tuning.gamma_t, "t")?;
        Ok((ws, wt))
    }
}

fn adaptive_weights(d: &DMatrix<f64>, delta_star: f64, gamma: f64, axis: &str) -> Result<DMatrix<f64>> {
    if gamma == 0.0 {
        return Ok(DMatrix::from_element(d.nrows(), d.ncols(), 1.0));
    }
    let max = d.amax();
    let delta = if max > 0.0 {
        delta_star * max
    } else if delta_star > 0.0 {
        delta_star
    } else {
        return Err(Error::InvalidWeights(format!(
            "flat pilot derivative along {axis} with delta* = 0 gives unbounded weights"
        )));
    };
    let w = d.map(|v| (v.abs() + delta).powf(-gamma));
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weights along {axis} are not finite; raise delta*_{axis} above 0"
        )));
    }
    Ok(w)
}

/// Block integrals over the cells of the breakpoint grids plus the
/// piecewise-constant penalty weights.
#[derive(Debug, Clone)]
pub struct PenaltySystem {
    grid_s: SubIntervalGrid,
    grid_t: SubIntervalGrid,
    orders: DerivOrders,
    w_s: Vec<DMatrix<f64>>,
    r_s: Vec<DMatrix<f64>>,
    w_t: Vec<DMatrix<f64>>,
    r_t: Vec<DMatrix<f64>>,
    w_t_full: DMatrix<f64>,
    weights_s: DMatrix<f64>,
    weights_t: DMatrix<f64>,
}

impl PenaltySystem {
    /// Blocks for the given breakpoint grids, all weights set to 1.
    pub fn new(
        basis_s: &BasisSystem,
        basis_t: &BasisSystem,
        grid_s: SubIntervalGrid,
        grid_t: SubIntervalGrid,
        orders: DerivOrders,
    ) -> Result<Self> {
        for (basis, m) in [(basis_s, orders.s), (basis_t, orders.t)] {
            if m >= basis.order() {
                return Err(Error::UnsupportedDerivative { deriv: m, order: basis.order() });
            }
        }
        let blocks = |basis: &BasisSystem, grid: &SubIntervalGrid, m: usize| -> Result<(Vec<_>, Vec<_>)> {
            let mut w = Vec::with_capacity(grid.cell_count());
            let mut r = Vec::with_capacity(grid.cell_count());
            for c in 0..grid.cell_count() {
                let (lo, hi) = grid.cell(c);
                w.push(gram(basis, 0, lo, hi)?);
                r.push(gram(basis, m, lo, hi)?);
            }
            Ok((w, r))
        };
        let (w_s, r_s) = blocks(basis_s, &grid_s, orders.s)?;
        let (w_t, r_t) = blocks(basis_t, &grid_t, orders.t)?;
        let dt = basis_t.domain();
        let w_t_full = gram(basis_t, 0, dt.start, dt.end)?;
        let shape = (grid_s.cell_count(), grid_t.cell_count());
        Ok(Self {
            grid_s,
            grid_t,
            orders,
            w_s,
            r_s,
            w_t,
            r_t,
            w_t_full,
            weights_s: DMatrix::from_element(shape.0, shape.1, 1.0),
            weights_t: DMatrix::from_element(shape.0, shape.1, 1.0),
        })
    }

    /// Breakpoints at the interior knots of each basis.
    pub fn on_knots(basis_s: &BasisSystem, basis_t: &BasisSystem, orders: DerivOrders) -> Result<Self> {
        let gs = SubIntervalGrid::new(basis_s.breakpoints().to_vec(), basis_s.domain())?;
        let gt = SubIntervalGrid::new(basis_t.breakpoints().to_vec(), basis_t.domain())?;
        Self::new(basis_s, basis_t, gs, gt, orders)
    }

    /// A single cell per axis: the non-adaptive penalty.
    pub fn whole_domain(basis_s: &BasisSystem, basis_t: &BasisSystem, orders: DerivOrders) -> Result<Self> {
        let gs = SubIntervalGrid::uniform(basis_s.domain(), 0);
        let gt = SubIntervalGrid::uniform(basis_t.domain(), 0);
        Self::new(basis_s, basis_t, gs, gt, orders)
    }

    pub fn grid_s(&self) -> &SubIntervalGrid {
        &self.grid_s
    }

    pub fn grid_t(&self) -> &SubIntervalGrid {
        &self.grid_t
    }

    pub fn orders(&self) -> DerivOrders {
        self.orders
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w_s[0].nrows(), self.w_t[0].nrows())
    }

    pub fn w_s(&self) -> &[DMatrix<f64>] {
        &self.w_s
    }

    pub fn r_s(&self) -> &[DMatrix<f64>] {
        &self.r_s
    }

    pub fn w_t(&self) -> &[DMatrix<f64>] {
        &self.w_t
    }

    pub fn r_t(&self) -> &[DMatrix<f64>] {
        &self.r_t
    }

    /// Whole-domain Gram matrix of the `t` basis.
    pub fn w_t_full(&self) -> &DMatrix<f64> {
        &self.w_t_full
    }

    pub fn weights(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.weights_s, &self.weights_t)
    }

    pub fn set_weights(&mut self, weights_s: DMatrix<f64>, weights_t: DMatrix<f64>) -> Result<()> {
        let shape = (self.grid_s.cell_count(), self.grid_t.cell_count());
        if weights_s.shape() != shape || weights_t.shape() != shape {
            return Err(Error::DimensionMismatch(format!(
                "weight grids must be {}x{}, got {:?} and {:?}",
                shape.0,
                shape.1,
                weights_s.shape(),
                weights_t.shape()
            )));
        }
        if weights_s.iter().chain(weights_t.iter()).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and positive".into()));
        }
        self.weights_s = weights_s;
        self.weights_t = weights_t;
        Ok(())
    }

    /// Copy with weights derived from pilot derivative estimates.
    pub fn with_adaptive_weights(&self, pilot: &DerivativeEstimates, tuning: &TuningPoint) -> Result<Self> {
        let (ws, wt) = pilot.weights(tuning)?;
        let mut out = self.clone();
        out.set_weights(ws, wt)?;
        Ok(out)
    }

    /// `sum_ij lambda_s d^s_ij (W_{t,j} kron R_{s,i}) + lambda_t d^t_ij (R_{t,j} kron W_{s,i})`.
    pub fn assemble(&self, lambda_s: f64, lambda_t: f64) -> DMatrix<f64> {
        let (p, q) = self.dims();
        let mut out = DMatrix::zeros(p * q, p * q);
        for j in 0..self.grid_t.cell_count() {
            // inner sums over the s cells collapse to one p x p matrix per t cell
            let mut rs = DMatrix::zeros(p, p);
            let mut ws = DMatrix::zeros(p, p);
            for i in 0..self.grid_s.cell_count() {
                rs += &self.r_s[i] * (lambda_s * self.weights_s[(i, j)]);
                ws += &self.w_s[i] * (lambda_t * self.weights_t[(i, j)]);
            }
            add_kron(&mut out, &self.w_t[j], &rs);
            add_kron(&mut out, &self.r_t[j], &ws);
        }
        out
    }

    /// Penalty evaluated directly from `B` as a sum of traces.
    pub fn trace_form(&self, coefs: &DMatrix<f64>, lambda_s: f64, lambda_t: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.grid_s.cell_count() {
            let brs = coefs.transpose() * &self.r_s[i] * coefs;
            let bws = coefs.transpose() * &self.w_s[i] * coefs;
            for j in 0..self.grid_t.cell_count() {
                total += lambda_s * self.weights_s[(i, j)] * (&brs * &self.w_t[j]).trace();
                total += lambda_t * self.weights_t[(i, j)] * (&bws * &self.r_t[j]).trace();
            }
        }
        total
    }
}

/// `out += a kron b`, skipping the zero entries of `a`.
pub fn add_kron(out: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let (p, pc) = b.shape();
    for ac in 0..a.ncols() {
        for ar in 0..a.nrows() {
            let s = a[(ar, ac)];
            if s == 0.0 {
                continue;
            }
            let mut dst = out.view_mut((ar * p, ac * pc), (p, pc));
            dst += b * s;
        }
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    add_kron(&mut out, a, b);
    out
}

/// Solves `[W_t kron G + P] vec(B) = vec(C)` for `B`, with `G = X^T X` and
/// `C = X^T Y`.
pub fn solve_penalized(
    gram_x: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    w_t: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, q) = cross.shape();
    let mut system = penalty.clone();
    add_kron(&mut system, w_t, gram_x);
    let rhs = DVector::from_column_slice(cross.as_slice());
    let b = solve_spd(&system, &rhs)?;
    Ok(DMatrix::from_column_slice(p, q, b.as_slice()))
}

fn check_design(data: &DesignMatrices, basis_s: &BasisSystem, basis_t: &BasisSystem) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if data.x.ncols() != basis_s.dimension() || data.y.ncols() != basis_t.dimension() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} and {} columns but the bases have dimensions {} and {}",
            data.x.ncols(),
            data.y.ncols(),
            basis_s.dimension(),
            basis_t.dimension()
        )));
    }
    Ok(())
}

/// Smoothing spline estimator with constant roughness parameters.
pub fn fit_smooth(
    data: &DesignMatrices,
    basis_s: &BasisSystem,
    basis_t: &BasisSystem,
    lambda_s: f64,
    lambda_t: f64,
    orders: DerivOrders,
) -> Result<CoefficientSurface> {
    let ps = PenaltySystem::whole_domain(basis_s, basis_t, orders)?;
    fit_adass(data, basis_s, basis_t, &ps, &TuningPoint::smooth(lambda_s, lambda_t))
}

/// Adaptive estimator for a penalty system whose weights are already set.
pub fn fit_adass(
    data: &DesignMatrices,
    basis_s: &BasisSystem,
    basis_t: &BasisSystem,
    ps: &PenaltySystem,
    tuning: &TuningPoint,
) -> Result<CoefficientSurface> {
    check_design(data, basis_s, basis_t)?;
    if ps.dims() != (basis_s.dimension(), basis_t.dimension()) {
        return Err(Error::DimensionMismatch("penalty blocks do not match the bases".into()));
    }
    tuning.validate()?;
    let (ws, wt) = ps.weights();
    if ws.iter().chain(wt.iter()).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidWeights("weights must be finite and positive".into()));
    }
    let penalty = ps.assemble(tuning.lambda_s, tuning.lambda_t);
    let coefs = solve_penalized(&data.gram_x(), &(data.x.transpose() * &data.y), ps.w_t_full(), &penalty)?;
    CoefficientSurface::new(coefs, basis_s.clone(), basis_t.clone())
}

/// Residual sum of squares written through the projections:
/// `sum ||Y_i||^2 - 2 tr(X B Y^T) + tr(X^T X B W_t B^T)`.
pub fn sse_trace_form(data: &DesignMatrices, coefs: &DMatrix<f64>, w_t: &DMatrix<f64>) -> f64 {
    let xb = &data.x * coefs;
    data.y_norm_sq - 2.0 * (&xb * data.y.transpose()).trace() + (data.gram_x() * coefs * w_t * coefs.transpose()).trace()
}

/// Penalized criterion minimized by [`fit_adass`].
pub fn objective(data: &DesignMatrices, ps: &PenaltySystem, tuning: &TuningPoint, coefs: &DMatrix<f64>) -> f64 {
    sse_trace_form(data, coefs, ps.w_t_full()) + ps.trace_form(coefs, tuning.lambda_s, tuning.lambda_t)
}

/// Fast exact solver for the non-adaptive problem.
///
/// With a single cell per axis the system is
/// `W_t kron (G + lambda_s R_s) + lambda_t R_t kron W_s`. Simultaneous
/// diagonalization of `(R_t, W_t)` and of `(G + lambda_s R_s, W_s)` turns it
/// into an elementwise division, so a whole `lambda_t` ladder costs one
/// symmetric eigendecomposition of size `dim_s`.
#[derive(Debug, Clone)]
pub struct SmoothSolver {
    w_s_chol_inv: DMatrix<f64>,
    r_s: DMatrix<f64>,
    // U with U^T W_t U = I, U^T R_t U = diag(nu)
    u: DMatrix<f64>,
    nu: DVector<f64>,
}

/// `(G + lambda_s R_s, W_s)` diagonalized for one fold and one `lambda_s`.
#[derive(Debug, Clone)]
pub struct SmoothFactor<'a> {
    solver: &'a SmoothSolver,
    v: DMatrix<f64>,
    mu: DVector<f64>,
}

fn generalized_eigen(a: &DMatrix<f64>, l_inv: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let c = l_inv * a * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    (l_inv.transpose() * eig.eigenvectors, eig.eigenvalues)
}

fn inverse_cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::SingularSystem)?;
    let l = chol.l();
    l.solve_lower_triangular(&DMatrix::identity(m.nrows(), m.nrows())).ok_or(Error::SingularSystem)
}

impl SmoothSolver {
    pub fn new(basis_s: &BasisSystem, basis_t: &BasisSystem, orders: DerivOrders) -> Result<Self> {
        let (ds, dt) = (basis_s.domain(), basis_t.domain());
        let w_s = gram(basis_s, 0, ds.start, ds.end)?;
        let r_s = gram(basis_s, orders.s, ds.start, ds.end)?;
        let w_t = gram(basis_t, 0, dt.start, dt.end)?;
        let r_t = gram(basis_t, orders.t, dt.start, dt.end)?;
        let w_s_chol_inv = inverse_cholesky_factor(&w_s)?;
        let (u, nu) = generalized_eigen(&r_t, &inverse_cholesky_factor(&w_t)?);
        Ok(Self { w_s_chol_inv, r_s, u, nu })
    }

    pub fn factor(&self, gram_x: &DMatrix<f64>, lambda_s: f64) -> SmoothFactor<'_> {
        let a = gram_x + &self.r_s * lambda_s;
        let (v, mu) = generalized_eigen(&a, &self.w_s_chol_inv);
        SmoothFactor { solver: self, v, mu }
    }
}

impl SmoothFactor<'_> {
    /// Coefficients for `cross = X^T Y` and the given `lambda_t`.
    pub fn solve(&self, cross: &DMatrix<f64>, lambda_t: f64) -> Result<DMatrix<f64>> {
        let u = &self.solver.u;
        let mut z = self.v.transpose() * cross * u;
        let scale = self.mu.amax().max(lambda_t * self.solver.nu.amax()).max(f64::MIN_POSITIVE);
        for j in 0..z.ncols() {
            for i in 0..z.nrows() {
                let d = self.mu[i] + lambda_t * self.solver.nu[j];
                if !(d > 1e-13 * scale) {
                    return Err(Error::SingularSystem);
                }
                z[(i, j)] /= d;
            }
        }
        Ok(&self.v * z * u.transpose())
    }
}

/// Predicted responses on `t_grid`, one row per curve of `x_new`.
pub fn predict(surface: &CoefficientSurface, x_new: &FunctionalSample, t_grid: &[f64]) -> Result<DMatrix<f64>> {
    check_same_domain(x_new.domain(), surface.basis_s().domain())?;
    let xp = project(x_new, surface.basis_s())?;
    let pt = surface.basis_t().eval_matrix(t_grid, 0)?;
    Ok(xp * surface.coefs() * pt.transpose())
}

/// Integrated squared error against `beta_true`, averaged over the rectangle,
/// by the tensor trapezoidal rule on `points x points` nodes.
pub fn ise_with_grid(surface: &CoefficientSurface, beta_true: impl Fn(f64, f64) -> f64, points: usize) -> Result<f64> {
    let (ds, dt) = (surface.basis_s().domain(), surface.basis_t().domain());
    let ss = linspace(ds.start, ds.end, points.max(2));
    let ts = linspace(dt.start, dt.end, points.max(2));
    let est = surface.eval_grid(&ss, &ts, 0, 0)?;
    let (ws, wt) = (trapezoid_weights(&ss), trapezoid_weights(&ts));
    let mut total = 0.0;
    for (j, t) in ts.iter().enumerate() {
        let inner: f64 = ss
            .iter()
            .enumerate()
            .map(|(i, s)| ws[i] * (est[(i, j)] - beta_true(*s, *t)).powi(2))
            .sum();
        total += wt[j] * inner;
    }
    Ok(total / (ds.length() * dt.length()))
}

pub fn ise(surface: &CoefficientSurface, beta_true: impl Fn(f64, f64) -> f64) -> Result<f64> {
    ise_with_grid(surface, beta_true, ISE_GRID_POINTS)
}

/// Mean over test curves of `int (Y - Y_hat)^2 dt`, trapezoid on the `Y` grid.
pub fn pmse(surface: &CoefficientSurface, test_x: &FunctionalSample, test_y: &FunctionalSample) -> Result<f64> {
    if test_x.is_empty() || test_y.is_empty() {
        return Err(Error::EmptySample);
    }
    if test_x.len() != test_y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} test predictors but {} test responses",
            test_x.len(),
            test_y.len()
        )));
    }
    check_same_domain(test_y.domain(), surface.basis_t().domain())?;
    let pred = predict(surface, test_x, test_y.grid())?;
    let resid = test_y.values() - pred;
    Ok(mean_squared_norm(test_y.grid(), &resid))
}

pub(crate) fn mean_squared_norm(grid: &[f64], rows: &DMatrix<f64>) -> f64 {
    let total: f64 = rows
        .row_iter()
        .map(|r| {
            let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
            trapezoid(grid, &sq)
        })
        .sum();
    total / rows.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::Domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bases(ms: usize, mt: usize) -> (BasisSystem, BasisSystem) {
        (BasisSystem::new(4, ms, Domain::unit()).unwrap(), BasisSystem::new(4, mt, Domain::unit()).unwrap())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize) -> DesignMatrices {
        DesignMatrices { x: random_matrix(rng, n, p), y: random_matrix(rng, n, q), y_norm_sq: 3.0 }
    }

    #[test]
    fn single_block_reduction() {
        let (bs, bt) = bases(2, 3);
        let ps = PenaltySystem::whole_domain(&bs, &bt, DerivOrders::default()).unwrap();
        let p = ps.assemble(0.3, 2.0);
        let expected = kron(&gram(&bt, 0, 0.0, 1.0).unwrap(), &gram(&bs, 2, 0.0, 1.0).unwrap()) * 0.3
            + kron(&gram(&bt, 2, 0.0, 1.0).unwrap(), &gram(&bs, 0, 0.0, 1.0).unwrap()) * 2.0;
        assert!((p - expected).amax() < 1e-12);
        assert_eq!(ps.assemble(0.0, 0.0).amax(), 0.0);
    }

    #[test]
    fn block_sum_equals_whole_gram() {
        let (bs, bt) = bases(5, 4);
        let ps = PenaltySystem::new(
            &bs,
            &bt,
            SubIntervalGrid::uniform(bs.domain(), 3),
            SubIntervalGrid::new(vec![0.0, 0.13, 0.5, 1.0], bt.domain()).unwrap(),
            DerivOrders::default(),
        )
        .unwrap();
        let sum_s = ps.w_s().iter().fold(DMatrix::zeros(9, 9), |acc, m| acc + m);
        assert!((sum_s - gram(&bs, 0, 0.0, 1.0).unwrap()).amax() < 1e-12);
        let sum_t = ps.w_t().iter().fold(DMatrix::zeros(8, 8), |acc, m| acc + m);
        assert!((sum_t - ps.w_t_full()).amax() < 1e-12);
    }

    #[test]
    fn quadratic_form_matches_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (bs, bt) = (BasisSystem::new(4, 1, Domain::unit()).unwrap(), BasisSystem::new(3, 3, Domain::unit()).unwrap());
        let mut ps = PenaltySystem::new(
            &bs,
            &bt,
            SubIntervalGrid::uniform(bs.domain(), 1),
            SubIntervalGrid::uniform(bt.domain(), 1),
            DerivOrders { s: 2, t: 1 },
        )
        .unwrap();
        let ws = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.1..3.0));
        let wt = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.1..3.0));
        ps.set_weights(ws, wt).unwrap();
        let b = random_matrix(&mut rng, 5, 6);
        let vb = DVector::from_column_slice(b.as_slice());
        let quad = (vb.transpose() * ps.assemble(0.7, 1.3) * &vb)[(0, 0)];
        let traces = ps.trace_form(&b, 0.7, 1.3);
        assert!((quad - traces).abs() < 1e-10 * traces.abs().max(1.0));
    }

    #[test]
    fn zero_response_gives_zero_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bs, bt) = bases(3, 3);
        let mut data = random_design(&mut rng, 15, 7, 7);
        data.y.fill(0.0);
        let fit = fit_smooth(&data, &bs, &bt, 1e-3, 1e-3, DerivOrders::default()).unwrap();
        assert_eq!(fit.coefs().amax(), 0.0);
    }

    #[test]
    fn smooth_solver_agrees_with_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (bs, bt) = bases(4, 6);
        let data = random_design(&mut rng, 25, 8, 10);
        let solver = SmoothSolver::new(&bs, &bt, DerivOrders::default()).unwrap();
        let g = data.gram_x();
        let c = data.x.transpose() * &data.y;
        for (ls, lt) in [(1e-6, 1e-4), (1e-2, 1.0), (10.0, 1e-8)] {
            let direct = fit_smooth(&data, &bs, &bt, ls, lt, DerivOrders::default()).unwrap();
            let fast = solver.factor(&g, ls).solve(&c, lt).unwrap();
            let scale = direct.coefs().amax().max(1.0);
            assert!((direct.coefs() - fast).amax() < 1e-8 * scale, "({ls}, {lt})");
        }
    }

    #[test]
    fn weights_follow_pilot_magnitude() {
        let pilot = DerivativeEstimates {
            d_s: DMatrix::from_row_slice(1, 2, &[1.0, 4.0]),
            d_t: DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
        };
        let tp = TuningPoint { lambda_s: 1.0, delta_star_s: 0.25, gamma_s: 1.0, lambda_t: 1.0, delta_star_t: 0.1, gamma_t: 2.0, cv_error: None };
        let (ws, wt) = pilot.weights(&tp).unwrap();
        // delta_s = 0.25 * 4 = 1
        assert!((ws[(0, 0)] - 0.5).abs() < 1e-15 && (ws[(0, 1)] - 0.2).abs() < 1e-15);
        // flat pilot with delta* > 0 uses delta* itself
        assert!((wt[(0, 0)] - 100.0).abs() < 1e-9);
        let flat = TuningPoint { delta_star_t: 0.0, ..tp };
        assert!(matches!(pilot.weights(&flat), Err(Error::InvalidWeights(_))));
        let zero_gamma = TuningPoint { delta_star_t: 0.0, gamma_t: 0.0, ..tp };
        assert!(pilot.weights(&zero_gamma).is_ok());
    }

    #[test]
    fn surface_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bs, bt) = bases(2, 1);
        let s = CoefficientSurface::new(random_matrix(&mut rng, 6, 5), bs, bt).unwrap();
        let back = CoefficientSurface::from_record(&s.to_record()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.to_record().coefficients[1], s.coefs()[(0, 1)]);
    }

    #[test]
    fn pmse_of_zero_surface_on_unit_curve() {
        let (bs, bt) = bases(2, 2);
        let s = CoefficientSurface::zeros(bs, bt);
        let grid = linspace(0.0, 1.0, 11);
        let x = FunctionalSample::on_grid(grid.clone(), DMatrix::from_element(1, 11, 0.3)).unwrap();
        let y = FunctionalSample::on_grid(grid, DMatrix::from_element(1, 11, 1.0)).unwrap();
        assert!((pmse(&s, &x, &y).unwrap() - 1.0).abs() < 1e-14);
        let empty = FunctionalSample::on_grid(vec![0.0, 1.0], DMatrix::zeros(0, 2)).unwrap();
        assert!(matches!(pmse(&s, &empty, &empty), Err(Error::EmptySample)));
    }

    #[test]
    fn ise_of_constant_offset() {
        let (bs, bt) = bases(2, 2);
        let s = CoefficientSurface::zeros(bs, bt);
        let v = ise(&s, |_, _| 1.5).unwrap();
        assert!((v - 2.25).abs() < 1e-12, "{v}");
        let same = s.clone();
        assert!(ise(&s, |a, b| same.eval(a, b).unwrap()).unwrap() < 1e-12);
    }
}
