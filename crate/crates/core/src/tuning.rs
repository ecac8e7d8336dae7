//! K-fold cross validation, grid search, and the evolutionary search over the
//! adaptive tuning parameters.

use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::BasisSystem;
use crate::error::{Error, Result};
use crate::estimator::{
    mean_squared_norm, solve_penalized, DerivativeEstimates, PenaltySystem, SmoothSolver, TuningPoint,
};
use crate::fdata::{project, DesignMatrices, FunctionalSample};

/// Assignment of observations to `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl CvPlan {
    /// Random permutation of `0..n` dealt round-robin into `k` folds.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("cross validation needs k >= 2, got {k}")));
        }
        if n < k {
            return Err(Error::InsufficientData(format!("{n} observations for {k} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut folds = vec![0; n];
        for (pos, &obs) in order.iter().enumerate() {
            folds[obs] = pos % k;
        }
        Ok(Self { k, folds, seed })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// `(training, held-out)` observation indices for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &g) in self.folds.iter().enumerate() {
            if g == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Raw paired curves with their basis projections, ready for fold splits.
#[derive(Debug, Clone)]
pub struct CvData {
    x_proj: DMatrix<f64>,
    y_proj: DMatrix<f64>,
    y_values: DMatrix<f64>,
    y_grid: Vec<f64>,
    psi_t: DMatrix<f64>,
}

impl CvData {
    pub fn new(x: &FunctionalSample, y: &FunctionalSample, basis_s: &BasisSystem, basis_t: &BasisSystem) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} predictor curves but {} responses", x.len(), y.len())));
        }
        Ok(Self {
            x_proj: project(x, basis_s)?,
            y_proj: project(y, basis_t)?,
            y_values: y.values().clone(),
            y_grid: y.grid().to_vec(),
            psi_t: basis_t.eval_matrix(y.grid(), 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x_proj.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x_proj.nrows() == 0
    }
}

/// One fold: centered training design and centered held-out data.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: DesignMatrices,
    test_x: DMatrix<f64>,
    test_y: DMatrix<f64>,
}

/// All folds of a plan, each centered with its own training means.
#[derive(Debug, Clone)]
pub struct CvFolds {
    folds: Vec<Fold>,
    y_grid: Vec<f64>,
    psi_t: DMatrix<f64>,
}

fn column_means(m: &DMatrix<f64>) -> RowDVector<f64> {
    m.row_mean()
}

fn subtract_row(m: &DMatrix<f64>, row: &RowDVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r -= row;
    }
    out
}

impl CvFolds {
    /// Projection is linear, so centering the projected rows with the training
    /// means equals projecting the centered curves.
    pub fn new(data: &CvData, plan: &CvPlan) -> Result<Self> {
        if plan.len() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "fold plan covers {} observations, data has {}",
                plan.len(),
                data.len()
            )));
        }
        if data.len() < plan.k {
            return Err(Error::InsufficientData(format!("{} observations for {} folds", data.len(), plan.k)));
        }
        let mut folds = Vec::with_capacity(plan.k);
        for f in 0..plan.k {
            let (train, test) = plan.split(f);
            let xt = data.x_proj.select_rows(&train);
            let yt = data.y_proj.select_rows(&train);
            let yv = data.y_values.select_rows(&train);
            let (mx, my, mv) = (column_means(&xt), column_means(&yt), column_means(&yv));
            let yv_c = subtract_row(&yv, &mv);
            let y_norm_sq = mean_squared_norm(&data.y_grid, &yv_c) * yv_c.nrows() as f64;
            folds.push(Fold {
                train: DesignMatrices { x: subtract_row(&xt, &mx), y: subtract_row(&yt, &my), y_norm_sq },
                test_x: subtract_row(&data.x_proj.select_rows(&test), &mx),
                test_y: subtract_row(&data.y_values.select_rows(&test), &mv),
            });
        }
        Ok(Self { folds, y_grid: data.y_grid.clone(), psi_t: data.psi_t.clone() })
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    /// Held-out PMSE of fold `f` for a coefficient matrix.
    pub fn held_out_error(&self, f: usize, coefs: &DMatrix<f64>) -> f64 {
        let fold = &self.folds[f];
        let pred = &fold.test_x * coefs * self.psi_t.transpose();
        mean_squared_norm(&self.y_grid, &(&fold.test_y - pred))
    }
}

/// A fitting procedure: centered training design in, coefficient matrix out.
pub trait FitProcedure: Sync {
    fn fit(&self, train: &DesignMatrices) -> Result<DMatrix<f64>>;
}

impl<F> FitProcedure for F
where
    F: Fn(&DesignMatrices) -> Result<DMatrix<f64>> + Sync,
{
    fn fit(&self, train: &DesignMatrices) -> Result<DMatrix<f64>> {
        self(train)
    }
}

/// Average over folds of the held-out prediction error.
pub fn cv_error(fit: &impl FitProcedure, folds: &CvFolds) -> Result<f64> {
    let mut total = 0.0;
    for (f, fold) in folds.folds.iter().enumerate() {
        let coefs = fit.fit(&fold.train)?;
        let e = folds.held_out_error(f, &coefs);
        if !e.is_finite() {
            return Err(Error::SingularSystem);
        }
        total += e;
    }
    Ok(total / folds.folds.len() as f64)
}

/// Non-adaptive fit through the diagonalized solver.
pub struct SmoothFit<'a> {
    pub solver: &'a SmoothSolver,
    pub lambda_s: f64,
    pub lambda_t: f64,
}

impl FitProcedure for SmoothFit<'_> {
    fn fit(&self, train: &DesignMatrices) -> Result<DMatrix<f64>> {
        let cross = train.x.transpose() * &train.y;
        self.solver.factor(&train.gram_x(), self.lambda_s).solve(&cross, self.lambda_t)
    }
}

/// Adaptive fit with a pre-assembled penalty matrix.
pub struct PenalizedFit<'a> {
    pub w_t: &'a DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

impl<'a> PenalizedFit<'a> {
    pub fn new(ps: &'a PenaltySystem, tuning: &TuningPoint) -> Result<Self> {
        tuning.validate()?;
        Ok(Self { w_t: ps.w_t_full(), penalty: ps.assemble(tuning.lambda_s, tuning.lambda_t) })
    }
}

impl FitProcedure for PenalizedFit<'_> {
    fn fit(&self, train: &DesignMatrices) -> Result<DMatrix<f64>> {
        solve_penalized(&train.gram_x(), &(train.x.transpose() * &train.y), self.w_t, &self.penalty)
    }
}

/// Outcome of an exhaustive search.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: Vec<f64>,
    pub error: f64,
    /// Every combination in lexicographic order with its CV error, or the
    /// message of the error that prevented it.
    pub evaluations: Vec<(Vec<f64>, std::result::Result<f64, String>)>,
}

/// Cartesian product in lexicographic order (first grid varies slowest).
pub fn cartesian(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    grids.iter().fold(vec![Vec::new()], |acc, g| {
        acc.iter()
            .flat_map(|prefix| {
                g.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

/// Minimizes the CV error over every combination of the grids. Ties go to the
/// first combination in lexicographic order.
pub fn grid_search<P, F>(family: F, grids: &[Vec<f64>], folds: &CvFolds) -> Result<GridSearchResult>
where
    P: FitProcedure,
    F: Fn(&[f64]) -> Result<P> + Sync,
{
    if grids.is_empty() || grids.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidConfig("grid search needs non-empty grids".into()));
    }
    let combos = cartesian(grids);
    let errors: Vec<std::result::Result<f64, String>> = combos
        .par_iter()
        .map(|c| family(c).and_then(|fit| cv_error(&fit, folds)).map_err(|e| e.to_string()))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in errors.iter().enumerate() {
        if let Ok(v) = e {
            if best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    let evaluations: Vec<_> = combos.into_iter().zip(errors).collect();
    match best {
        Some((i, error)) => Ok(GridSearchResult { best: evaluations[i].0.clone(), error, evaluations }),
        None => Err(Error::SearchFailed(
            evaluations.iter().filter_map(|(_, e)| e.as_ref().err().cloned()).take(5).collect(),
        )),
    }
}

/// Decade ladder `10^lo, 10^(lo + step), ..., 10^hi`.
pub fn log_ladder(lo_exp: f64, hi_exp: f64, step: f64) -> Vec<f64> {
    let count = ((hi_exp - lo_exp) / step).round() as usize + 1;
    (0..count).map(|i| 10f64.powf(lo_exp + i as f64 * step)).collect()
}

/// Grid search of `(lambda_s, lambda_t)` for the non-adaptive estimator.
pub fn tune_smooth(solver: &SmoothSolver, ladder: &[f64], folds: &CvFolds) -> Result<GridSearchResult> {
    grid_search(
        |p: &[f64]| Ok(SmoothFit { solver, lambda_s: p[0], lambda_t: p[1] }),
        &[ladder.to_vec(), ladder.to_vec()],
        folds,
    )
}

/// Sampling scale of a search dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

/// Closed interval a parameter is sampled from and clamped to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
}

impl ParamRange {
    pub fn linear(lo: f64, hi: f64) -> Self {
        Self { lo, hi, scale: Scale::Linear }
    }

    pub fn log(lo: f64, hi: f64) -> Self {
        Self { lo, hi, scale: Scale::Log }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lo.is_finite()
            && self.hi.is_finite()
            && self.lo <= self.hi
            && self.lo >= 0.0
            && (self.scale == Scale::Linear || self.lo > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid parameter range {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        match self.scale {
            Scale::Linear => rng.random_range(self.lo..=self.hi),
            Scale::Log => rng.random_range(self.lo.ln()..=self.hi.ln()).exp(),
        }
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Ranges of the six adaptive tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub lambda_s: ParamRange,
    pub delta_star_s: ParamRange,
    pub gamma_s: ParamRange,
    pub lambda_t: ParamRange,
    pub delta_star_t: ParamRange,
    pub gamma_t: ParamRange,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            lambda_s: ParamRange::log(1e-8, 1e2),
            delta_star_s: ParamRange::linear(0.0, 0.1),
            gamma_s: ParamRange::linear(0.0, 4.0),
            lambda_t: ParamRange::log(1e-8, 1e2),
            delta_star_t: ParamRange::linear(0.0, 0.1),
            gamma_t: ParamRange::linear(0.0, 4.0),
        }
    }
}

impl ParamRanges {
    /// In [`TuningPoint::to_array`] order.
    pub fn to_vec(&self) -> Vec<ParamRange> {
        vec![self.lambda_s, self.delta_star_s, self.gamma_s, self.lambda_t, self.delta_star_t, self.gamma_t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EaassConfig {
    pub population_size: usize,
    /// Fraction of the population replaced at every iteration.
    pub truncation_fraction: f64,
    pub perturb_factors: (f64, f64),
    pub max_iterations: usize,
    /// Additive step applied instead of a factor to zero-valued linear-scale parameters.
    pub zero_step: f64,
    pub ranges: ParamRanges,
    pub seed: u64,
}

impl Default for EaassConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            truncation_fraction: 0.2,
            perturb_factors: (1.2, 0.8),
            max_iterations: 15,
            zero_step: 0.01,
            ranges: ParamRanges::default(),
            seed: 0,
        }
    }
}

impl EaassConfig {
    fn validate(&self, ranges: &[ParamRange]) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::InvalidConfig("population size must be at least 2".into()));
        }
        if !(self.truncation_fraction > 0.0 && self.truncation_fraction < 1.0) {
            return Err(Error::InvalidConfig("truncation fraction must lie in (0, 1)".into()));
        }
        let (a, b) = self.perturb_factors;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidConfig("perturbation factors must be positive".into()));
        }
        if !(self.zero_step >= 0.0 && self.zero_step.is_finite()) {
            return Err(Error::InvalidConfig("zero step must be nonnegative".into()));
        }
        ranges.iter().try_for_each(|r| r.validate())
    }

    /// Members replaced per iteration; the best member always survives.
    pub fn replaced_count(&self) -> usize {
        let n = (self.truncation_fraction * self.population_size as f64).ceil() as usize;
        n.clamp(1, self.population_size - 1)
    }
}

/// One evaluated population member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberRecord {
    pub iteration: usize,
    pub member: usize,
    pub params: Vec<f64>,
    pub error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub best: Vec<f64>,
    pub best_error: f64,
    /// Best error after the initial evaluation and after every iteration.
    pub history: Vec<f64>,
    /// Every evaluation, including failures.
    pub records: Vec<MemberRecord>,
}

fn rank_key(e: &std::result::Result<f64, String>) -> f64 {
    match e {
        Ok(v) if v.is_finite() => *v,
        _ => f64::INFINITY,
    }
}

/// Population search with truncation selection and multiplicative
/// perturbation, minimizing `objective` over boxes given by `ranges`.
pub fn evolve<F>(config: &EaassConfig, ranges: &[ParamRange], objective: F) -> Result<EvolutionResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    config.validate(ranges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.population_size;
    let mut population: Vec<Vec<f64>> =
        (0..size).map(|_| ranges.iter().map(|r| r.sample(&mut rng)).collect()).collect();
    let evaluate = |members: &[Vec<f64>]| -> Vec<std::result::Result<f64, String>> {
        members
            .par_iter()
            .map(|p| objective(p).and_then(|v| if v.is_finite() { Ok(v) } else { Err(Error::SingularSystem) }))
            .map(|r| r.map_err(|e| e.to_string()))
            .collect()
    };
    let mut errors = evaluate(&population);
    let mut records: Vec<MemberRecord> = population
        .iter()
        .zip(&errors)
        .enumerate()
        .map(|(m, (p, e))| MemberRecord { iteration: 0, member: m, params: p.clone(), error: e.as_ref().ok().copied() })
        .collect();
    let best_of = |errors: &[std::result::Result<f64, String>]| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in errors.iter().enumerate() {
            let v = rank_key(e);
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        best
    };
    let mut history = vec![best_of(&errors).map_or(f64::INFINITY, |b| b.1)];
    let replaced = config.replaced_count();
    let (up, down) = config.perturb_factors;

    for iteration in 1..=config.max_iterations {
        // exploitation: stable ranking, worst `replaced` slots get new members
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| rank_key(&errors[a]).total_cmp(&rank_key(&errors[b])));
        let (survivors, losers) = order.split_at(size - replaced);
        let mut fresh = Vec::with_capacity(replaced);
        for _ in losers {
            let parent = &population[survivors[rng.random_range(0..survivors.len())]];
            // exploration
            let child: Vec<f64> = parent
                .iter()
                .zip(ranges)
                .map(|(&v, r)| {
                    let grow = rng.random_bool(0.5);
                    let moved = if v == 0.0 && r.scale == Scale::Linear {
                        if grow { config.zero_step } else { -config.zero_step }
                    } else {
                        v * if grow { up } else { down }
                    };
                    r.clamp(moved)
                })
                .collect();
            fresh.push(child);
        }
        let fresh_errors = evaluate(&fresh);
        for ((&slot, child), e) in losers.iter().zip(fresh).zip(fresh_errors) {
            records.push(MemberRecord {
                iteration,
                member: slot,
                params: child.clone(),
                error: e.as_ref().ok().copied(),
            });
            population[slot] = child;
            errors[slot] = e;
        }
        history.push(best_of(&errors).map_or(f64::INFINITY, |b| b.1));
    }

    match best_of(&errors) {
        Some((i, v)) => Ok(EvolutionResult { best: population[i].clone(), best_error: v, history, records }),
        None => Err(Error::SearchFailed(errors.into_iter().filter_map(|e| e.err()).take(5).collect())),
    }
}

/// Outcome of the adaptive tuning search.
#[derive(Debug, Clone)]
pub struct EaassOutcome {
    pub best: TuningPoint,
    pub history: Vec<f64>,
    pub records: Vec<MemberRecord>,
}

/// Evolutionary search over the six adaptive tuning parameters with CV
/// prediction error as the fitness. `pilot` holds the fixed pilot derivative
/// estimates; `template` supplies the blocks.
pub fn eaass(folds: &CvFolds, template: &PenaltySystem, pilot: &DerivativeEstimates, config: &EaassConfig) -> Result<EaassOutcome> {
    let objective = |p: &[f64]| -> Result<f64> {
        let tuning = TuningPoint::from_array(p);
        let ps = template.with_adaptive_weights(pilot, &tuning)?;
        cv_error(&PenalizedFit::new(&ps, &tuning)?, folds)
    };
    let result = evolve(config, &config.ranges.to_vec(), objective)?;
    let mut best = TuningPoint::from_array(&result.best);
    best.cv_error = Some(result.best_error);
    Ok(EaassOutcome { best, history: result.history, records: result.records })
}

/// Search history as CSV: iteration, member, the six parameters, CV error
/// (empty when the evaluation failed).
pub fn write_history_csv(path: impl AsRef<Path>, records: &[MemberRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["iteration", "member", "lambda_s", "delta_star_s", "gamma_s", "lambda_t", "delta_star_t", "gamma_t", "cv_error"])?;
    for r in records {
        let mut row = vec![r.iteration.to_string(), r.member.to_string()];
        row.extend(r.params.iter().map(|v| v.to_string()));
        row.push(r.error.map(|e| e.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
