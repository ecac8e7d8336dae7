//! Samples of curves observed on a common grid, and their basis projections.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::bspline::{BasisSystem, Domain};
use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, trapezoid};

/// `n` curves sampled on a shared, strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSample {
    grid: Vec<f64>,
    values: DMatrix<f64>,
    domain: Domain,
}

impl FunctionalSample {
    /// Rows of `values` are curves, columns follow `grid`.
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>, domain: Domain) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InconsistentGrid("a grid needs at least two points".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InconsistentGrid("grid must be strictly increasing".into()));
        }
        if !domain.contains(grid[0]) || !domain.contains(grid[grid.len() - 1]) {
            return Err(Error::DomainMismatch(format!(
                "grid [{}, {}] leaves the domain [{}, {}]",
                grid[0],
                grid[grid.len() - 1],
                domain.start,
                domain.end
            )));
        }
        if values.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} columns of values for a grid of {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("curve values must be finite".into()));
        }
        Ok(Self { grid, values, domain })
    }

    /// Domain taken as `[grid[0], grid[last]]`.
    pub fn on_grid(grid: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        let domain = match (grid.first(), grid.last()) {
            (Some(&a), Some(&b)) => Domain::new(a, b)?,
            _ => return Err(Error::InconsistentGrid("empty grid".into())),
        };
        Self::new(grid, values, domain)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn curve(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Sub-sample made of the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.select_rows(rows),
            domain: self.domain,
        }
    }

    /// Pointwise mean curve.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(self.values.row_mean().iter().copied().collect())
    }

    /// Subtracts `mean` from every curve.
    pub fn subtract(&self, mean: &[f64]) -> Result<Self> {
        if mean.len() != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean curve of length {} for a grid of {} points",
                mean.len(),
                self.grid.len()
            )));
        }
        let mut values = self.values.clone();
        for mut row in values.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(mean) {
                *v -= m;
            }
        }
        Ok(Self { grid: self.grid.clone(), values, domain: self.domain })
    }

    /// Integral of each squared curve over the grid.
    pub fn squared_norms(&self) -> Vec<f64> {
        self.values
            .row_iter()
            .map(|r| {
                let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
                trapezoid(&self.grid, &sq)
            })
            .collect()
    }
}

/// Removes the pointwise sample mean. Returns the centered sample and the mean
/// curve, which is what held-out data must be centered with.
pub fn center(sample: &FunctionalSample) -> Result<(FunctionalSample, Vec<f64>)> {
    let mean = sample.mean()?;
    Ok((sample.subtract(&mean)?, mean))
}

/// `n x dim` matrix whose row `i` approximates `int curve_i(x) psi(x) dx`.
///
/// Each curve is replaced by its piecewise-linear interpolant through the
/// samples (the function the trapezoidal rule integrates), and the product
/// with the basis is then integrated exactly.
pub fn project(sample: &FunctionalSample, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    check_same_domain(sample.domain(), basis.domain())?;
    let weights = projection_matrix(sample.grid(), basis)?;
    Ok(sample.values() * weights)
}

/// `grid x dim` matrix `P` with `P[g, j] = int hat_g(x) psi_j(x) dx`, where
/// `hat_g` is the piecewise-linear interpolation weight of grid node `g`.
pub fn projection_matrix(grid: &[f64], basis: &BasisSystem) -> Result<DMatrix<f64>> {
    let dom = basis.domain();
    if let (Some(&a), Some(&b)) = (grid.first(), grid.last()) {
        if !dom.contains(a) || !dom.contains(b) {
            return Err(Error::DomainMismatch(format!(
                "grid [{a}, {b}] leaves the basis domain [{}, {}]",
                dom.start, dom.end
            )));
        }
    }
    let k = basis.order();
    let (nodes, weights) = gauss_legendre(k.div_ceil(2) + 1);
    let knots = basis.breakpoints();
    let mut out = DMatrix::zeros(grid.len(), basis.dimension());
    let mut local = vec![0.0; k];
    for g in 0..grid.len().saturating_sub(1) {
        let (x0, x1) = (grid[g], grid[g + 1]);
        let width = x1 - x0;
        let mut cuts = vec![x0, x1];
        cuts.extend(knots.iter().copied().filter(|&x| x > x0 && x < x1));
        cuts.sort_by(f64::total_cmp);
        for seg in cuts.windows(2) {
            let half = 0.5 * (seg[1] - seg[0]);
            let mid = 0.5 * (seg[1] + seg[0]);
            for (z, w) in nodes.iter().zip(&weights) {
                let x = mid + half * z;
                let right = (x - x0) / width;
                let first = basis.eval_local(x, 0, &mut local);
                for (j, v) in local.iter().enumerate() {
                    let wv = w * half * v;
                    out[(g, first + j)] += wv * (1.0 - right);
                    out[(g + 1, first + j)] += wv * right;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_same_domain(a: Domain, b: Domain) -> Result<()> {
    let tol = 1e-12 * (a.length() + b.length());
    if (a.start - b.start).abs() > tol || (a.end - b.end).abs() > tol {
        return Err(Error::DomainMismatch(format!(
            "[{}, {}] versus [{}, {}]",
            a.start, a.end, b.start, b.end
        )));
    }
    Ok(())
}

/// Projections entering the least-squares criterion.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// `n x dim_s`, rows `int X_i psi^s`.
    pub x: DMatrix<f64>,
    /// `n x dim_t`, rows `int Y_i psi^t`.
    pub y: DMatrix<f64>,
    /// `sum_i int Y_i^2`.
    pub y_norm_sq: f64,
}

impl DesignMatrices {
    pub fn new(x: &FunctionalSample, y: &FunctionalSample, basis_s: &BasisSystem, basis_t: &BasisSystem) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} predictor curves but {} responses", x.len(), y.len())));
        }
        if x.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(Self {
            x: project(x, basis_s)?,
            y: project(y, basis_t)?,
            y_norm_sq: y.squared_norms().iter().sum(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn gram_x(&self) -> DMatrix<f64> {
        self.x.transpose() * &self.x
    }

    /// `vec(X^T Y)`, column-major.
    pub fn cross(&self) -> DVector<f64> {
        let xty = self.x.transpose() * &self.y;
        DVector::from_column_slice(xty.as_slice())
    }
}

/// Reads a long-format CSV (one row per observation) into a sample. Curves are
/// ordered by first appearance of their identifier and must share one grid.
pub fn load_csv(path: impl AsRef<Path>, curve_column: &str, arg_column: &str, value_column: &str) -> Result<FunctionalSample> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 1, message: format!("missing column `{name}`") })
    };
    let (ci, ai, vi) = (col(curve_column)?, col(arg_column)?, col(value_column)?);

    let mut order: Vec<String> = Vec::new();
    let mut curves: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (k, record) in reader.records().enumerate() {
        // header is row 1
        let row = k + 2;
        let record = record?;
        let field = |i: usize| record.get(i).ok_or_else(|| Error::Parse { row, message: "missing field".into() });
        let id = field(ci)?.to_string();
        let parse = |i: usize, what: &str| -> Result<f64> {
            let raw = field(i)?;
            raw.parse::<f64>()
                .map_err(|_| Error::Parse { row, message: format!("{what} `{raw}` is not a number") })
        };
        let arg = parse(ai, "argument")?;
        let value = parse(vi, "value")?;
        if !curves.contains_key(&id) {
            order.push(id.clone());
        }
        curves.entry(id).or_default().push((arg, value));
    }
    if order.is_empty() {
        return Err(Error::EmptySample);
    }

    let mut grid: Option<Vec<f64>> = None;
    let mut values = DMatrix::zeros(order.len(), 0);
    for (i, id) in order.iter().enumerate() {
        let points = curves.get_mut(id).expect("identifier recorded on first sight");
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let args: Vec<f64> = points.iter().map(|p| p.0).collect();
        match &grid {
            None => {
                values = DMatrix::zeros(order.len(), args.len());
                grid = Some(args);
            }
            Some(g) if *g != args => {
                return Err(Error::InconsistentGrid(format!(
                    "curve `{id}` has {} points that differ from the {} points of curve `{}`",
                    args.len(),
                    g.len(),
                    order[0]
                )));
            }
            Some(_) => {}
        }
        for (j, p) in points.iter().enumerate() {
            values[(i, j)] = p.1;
        }
    }
    FunctionalSample::on_grid(grid.expect("at least one curve"), values)
}

/// Writes `sample` in the long format read by [`load_csv`], with columns
/// `curve,arg,value` and identifiers `0..n`.
pub fn write_csv(path: impl AsRef<Path>, sample: &FunctionalSample) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["curve", "arg", "value"])?;
    for (i, row) in sample.values().row_iter().enumerate() {
        let id = i.to_string();
        for (x, v) in sample.grid().iter().zip(row.iter()) {
            w.write_record([id.as_str(), &x.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header-only long-format file, for empty sets.
pub fn write_empty_csv(path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["curve", "arg", "value"])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::gram;
    use crate::quadrature::linspace;

    fn sample(rows: &[Vec<f64>], grid: Vec<f64>) -> FunctionalSample {
        let values = DMatrix::from_fn(rows.len(), grid.len(), |i, j| rows[i][j]);
        FunctionalSample::on_grid(grid, values).unwrap()
    }

    #[test]
    fn centering_single_curve_gives_zero() {
        let s = sample(&[vec![1.0, 2.0, 3.0]], vec![0.0, 0.5, 1.0]);
        let (c, mean) = center(&s).unwrap();
        assert_eq!(mean, vec![1.0, 2.0, 3.0]);
        assert!(c.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centering_symmetric_pair_is_identity() {
        let f = vec![0.3, -1.0, 2.5];
        let g: Vec<f64> = f.iter().map(|v| -v).collect();
        let s = sample(&[f, g], vec![0.0, 0.5, 1.0]);
        let (c, mean) = center(&s).unwrap();
        assert!(mean.iter().all(|m| *m == 0.0));
        assert_eq!(c.values(), s.values());
    }

    #[test]
    fn centering_empty_sample_fails() {
        let s = FunctionalSample::on_grid(vec![0.0, 1.0], DMatrix::zeros(0, 2)).unwrap();
        assert!(matches!(center(&s), Err(Error::EmptySample)));
    }

    #[test]
    fn projection_of_constant_onto_indicators() {
        let grid = linspace(0.0, 1.0, 1001);
        let s = sample(&[vec![1.0; 1001]], grid);
        let b = BasisSystem::new(1, 1, Domain::unit()).unwrap();
        let p = project(&s, &b).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((p[(0, 1)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn projection_of_basis_function_matches_gram_row() {
        let grid = linspace(0.0, 1.0, 2001);
        let b = BasisSystem::new(4, 8, Domain::unit()).unwrap();
        let phi = b.eval_matrix(&grid, 0).unwrap();
        let curve: Vec<f64> = phi.column(0).iter().copied().collect();
        let s = sample(&[curve], grid);
        let p = project(&s, &b).unwrap();
        let g = gram(&b, 0, 0.0, 1.0).unwrap();
        for j in 0..b.dimension() {
            assert!((p[(0, j)] - g[(0, j)]).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_of_zero_curve_is_zero() {
        let s = sample(&[vec![0.0; 11]], linspace(0.0, 1.0, 11));
        let b = BasisSystem::new(4, 3, Domain::unit()).unwrap();
        assert!(project(&s, &b).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_rejects_domain_mismatch() {
        let s = sample(&[vec![1.0, 1.0]], vec![0.0, 2.0]);
        let b = BasisSystem::new(4, 2, Domain::unit()).unwrap();
        assert!(matches!(project(&s, &b), Err(Error::DomainMismatch(_))));
    }

    #[test]
    fn csv_ragged_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "id,x,y\na,0,1\na,0.5,2\na,1,3\nb,0,1\nb,1,3\n").unwrap();
        assert!(matches!(load_csv(&path, "id", "x", "y"), Err(Error::InconsistentGrid(_))));
    }

    #[test]
    fn csv_parse_error_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,x,y\na,0,1\na,1,oops\n").unwrap();
        match load_csv(&path, "id", "x", "y") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_well_formed_two_curves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.csv");
        std::fs::write(&path, "id,x,y\nb,0,1\nb,0.5,2\nb,1,3\na,1,6\na,0,4\na,0.5,5\n").unwrap();
        let s = load_csv(&path, "id", "x", "y").unwrap();
        assert_eq!(s.values().shape(), (2, 3));
        assert_eq!(s.curve(0), vec![1.0, 2.0, 3.0]);
        assert_eq!(s.curve(1), vec![4.0, 5.0, 6.0]);
    }
}
