//! Simulation scenarios, data generation with calibrated noise, and the
//! Monte Carlo comparison of the estimators.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{BasisSystem, Domain};
use crate::error::{Error, Result};
use crate::estimator::{
    fit_adass, fit_smooth, initial_derivatives, CoefficientSurface, ise_with_grid, pmse, DerivOrders, DerivativeEstimates, PenaltySystem,
    SmoothSolver, ISE_GRID_POINTS,
};
use crate::fdata::{center, DesignMatrices, FunctionalSample};
use crate::quadrature::{linspace, trapezoid, trapezoid_weights};
use crate::seeds::{derive_seed, rng_for, Stream};
use crate::tuning::{eaass, log_ladder, tune_smooth, CvData, CvFolds, CvPlan, EaassConfig};

/// Step of the central differences used for the true second partials.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    MexicanHat,
    DampenedHarmonic,
    RapidChange,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::MexicanHat, Scenario::DampenedHarmonic, Scenario::RapidChange];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::MexicanHat => "mexican_hat",
            Scenario::DampenedHarmonic => "dampened_harmonic",
            Scenario::RapidChange => "rapid_change",
        }
    }

    pub fn beta(&self, s: f64, t: f64) -> f64 {
        match self {
            Scenario::MexicanHat => {
                let var = 0.001;
                let q = ((s - 0.6).powi(2) + (t - 0.6).powi(2)) / var;
                let density = (-0.5 * q).exp() / (2.0 * PI * var);
                -1.0 + 1.5 * s + 1.5 * t + 0.05 * density
            }
            Scenario::DampenedHarmonic => {
                1.0 + 5.0 * (-5.0 * (s + t)).exp() * ((10.0 * PI * s).cos() + (10.0 * PI * t).cos())
            }
            Scenario::RapidChange => {
                1.0 - 5.0 / (1.0 + (10.0 * (s + t - 0.2)).exp()) + 5.0 / (1.0 + (75.0 * (s + t - 0.8)).exp())
            }
        }
    }

    /// Second partial in `s` by central differences.
    pub fn beta_ss(&self, s: f64, t: f64) -> f64 {
        let h = FD_STEP;
        (self.beta(s + h, t) - 2.0 * self.beta(s, t) + self.beta(s - h, t)) / (h * h)
    }

    /// Second partial in `t` by central differences.
    pub fn beta_tt(&self, s: f64, t: f64) -> f64 {
        let h = FD_STEP;
        (self.beta(s, t + h) - 2.0 * self.beta(s, t) + self.beta(s, t - h)) / (h * h)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

pub fn beta_eval(scenario: Scenario, s: f64, t: f64) -> f64 {
    scenario.beta(s, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n: usize,
    pub n_test: usize,
    pub grid_s: usize,
    pub grid_t: usize,
    pub sn_target: f64,
    pub x_basis_count: usize,
    pub e_basis_count: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n: 100, n_test: 4000, grid_s: 101, grid_t: 101, sn_target: 4.0, x_basis_count: 32, e_basis_count: 20, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidConfig("training size must be at least 1".into()));
        }
        if self.grid_s < 2 || self.grid_t < 2 {
            return Err(Error::InvalidConfig("grids need at least two points".into()));
        }
        if !(self.sn_target > 0.0 && self.sn_target.is_finite()) {
            return Err(Error::InvalidConfig("signal-to-noise target must be positive".into()));
        }
        if self.x_basis_count < 4 || self.e_basis_count < 4 {
            return Err(Error::InvalidConfig("cubic generator bases need at least 4 functions".into()));
        }
        Ok(())
    }

    pub fn s_grid(&self) -> Vec<f64> {
        linspace(0.0, 1.0, self.grid_s)
    }

    pub fn t_grid(&self) -> Vec<f64> {
        linspace(0.0, 1.0, self.grid_t)
    }

    fn cubic(count: usize) -> Result<BasisSystem> {
        BasisSystem::new(4, count - 4, Domain::unit())
    }
}

/// Random curves `sum_j c_j psi_j` with standard normal `c_j`, one per row.
fn random_spline_curves(count: usize, basis: &BasisSystem, grid: &[f64], rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let psi = basis.eval_matrix(grid, 0)?;
    let coefs = DMatrix::from_fn(count, basis.dimension(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(coefs * psi.transpose())
}

/// `count` covariate curves on the configured `s` grid.
pub fn gen_covariates(cfg: &GenConfig, count: usize, rng: &mut impl Rng) -> Result<FunctionalSample> {
    cfg.validate()?;
    let basis = GenConfig::cubic(cfg.x_basis_count)?;
    let grid = cfg.s_grid();
    let values = random_spline_curves(count, &basis, &grid, rng)?;
    FunctionalSample::new(grid, values, Domain::unit())
}

/// `m_i(t) = int X_i(s) beta(s, t) ds` on the `t` grid, trapezoid in `s`.
pub fn signal(x: &FunctionalSample, scenario: Scenario, t_grid: &[f64]) -> DMatrix<f64> {
    let sw = trapezoid_weights(x.grid());
    let kernel = DMatrix::from_fn(x.grid().len(), t_grid.len(), |a, b| sw[a] * scenario.beta(x.grid()[a], t_grid[b]));
    x.values() * kernel
}

/// `int sum_j psi_j(t)^2 dt`, the integrated variance of unscaled noise.
pub fn noise_variance_integral(cfg: &GenConfig) -> Result<f64> {
    let basis = GenConfig::cubic(cfg.e_basis_count)?;
    let grid = cfg.t_grid();
    let psi = basis.eval_matrix(&grid, 0)?;
    let pointwise: Vec<f64> = psi.row_iter().map(|r| r.norm_squared()).collect();
    Ok(trapezoid(&grid, &pointwise))
}

/// `int Var_i(m_i(t)) dt` with the sample variance across curves.
pub fn signal_variance_integral(m: &DMatrix<f64>, t_grid: &[f64]) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let var: Vec<f64> = m
        .column_iter()
        .map(|c| {
            let mean = c.mean();
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect();
    trapezoid(t_grid, &var)
}

/// Noise scale giving the configured signal-to-noise ratio for signals `m`.
pub fn calibrate(m: &DMatrix<f64>, cfg: &GenConfig) -> Result<f64> {
    cfg.validate()?;
    let num = signal_variance_integral(m, &cfg.t_grid());
    if !(num > 0.0 && num.is_finite()) {
        return Err(Error::CannotCalibrate(format!(
            "signal variance is {num}; need at least two curves and a nonzero coefficient function"
        )));
    }
    Ok((num / (cfg.sn_target * noise_variance_integral(cfg)?)).sqrt())
}

/// Unscaled noise curves on the `t` grid.
pub fn gen_noise(cfg: &GenConfig, count: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let basis = GenConfig::cubic(cfg.e_basis_count)?;
    random_spline_curves(count, &basis, &cfg.t_grid(), rng)
}

/// Responses with the noise scale calibrated on `x` itself. Returns `(Y, k)`.
pub fn gen_response(x: &FunctionalSample, scenario: Scenario, cfg: &GenConfig, rng: &mut impl Rng) -> Result<(FunctionalSample, f64)> {
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    let m = signal(x, scenario, &cfg.t_grid());
    let noise = gen_noise(cfg, x.len(), rng)?;
    let k = calibrate(&m, cfg)?;
    Ok((FunctionalSample::new(cfg.t_grid(), m + noise * k, Domain::unit())?, k))
}

/// Responses with a given noise scale, as for test sets.
pub fn gen_response_with_scale(
    x: &FunctionalSample,
    scenario: Scenario,
    cfg: &GenConfig,
    k: f64,
    rng: &mut impl Rng,
) -> Result<FunctionalSample> {
    let m = signal(x, scenario, &cfg.t_grid());
    let noise = gen_noise(cfg, x.len(), rng)?;
    FunctionalSample::new(cfg.t_grid(), m + noise * k, Domain::unit())
}

/// One simulated training/test pair.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub train_x: FunctionalSample,
    pub train_y: FunctionalSample,
    pub test_x: FunctionalSample,
    pub test_y: FunctionalSample,
    pub noise_scale: f64,
}

/// Training set, then test set with the training noise scale, from one stream.
pub fn simulate(scenario: Scenario, cfg: &GenConfig, rng: &mut impl Rng) -> Result<SimulatedData> {
    let train_x = gen_covariates(cfg, cfg.n, rng)?;
    let (train_y, k) = gen_response(&train_x, scenario, cfg, rng)?;
    let test_x = gen_covariates(cfg, cfg.n_test, rng)?;
    let test_y = gen_response_with_scale(&test_x, scenario, cfg, k, rng)?;
    Ok(SimulatedData { train_x, train_y, test_x, test_y, noise_scale: k })
}

/// `beta` on a dense grid as CSV with columns `s,t,beta`.
pub fn write_beta_grid_csv(path: impl AsRef<Path>, scenario: Scenario, points: usize) -> Result<()> {
    let grid = linspace(0.0, 1.0, points);
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["s", "t", "beta"])?;
    for &s in &grid {
        for &t in &grid {
            w.write_record([s.to_string(), t.to_string(), scenario.beta(s, t).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "SMOOTH")]
    Smooth,
    #[serde(rename = "AdaSS")]
    Adass,
    #[serde(rename = "AdaSStrue")]
    AdassTrue,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Smooth, EstimatorKind::Adass, EstimatorKind::AdassTrue];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Smooth => "SMOOTH",
            EstimatorKind::Adass => "AdaSS",
            EstimatorKind::AdassTrue => "AdaSStrue",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator {s:?}")))
    }
}

/// Everything a Monte Carlo study needs besides the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub generation: GenConfig,
    pub order: usize,
    pub interior_knots_s: usize,
    pub interior_knots_t: usize,
    pub deriv_s: usize,
    pub deriv_t: usize,
    pub cv_folds: usize,
    /// Decimal exponents `(lo, hi, step)` of the SMOOTH grid-search ladder.
    pub smooth_ladder: (f64, f64, f64),
    pub eaass: EaassConfig,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    pub ise_grid_points: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            generation: GenConfig::default(),
            order: 4,
            interior_knots_s: 20,
            interior_knots_t: 20,
            deriv_s: 2,
            deriv_t: 2,
            cv_folds: 5,
            smooth_ladder: (-8.0, 2.0, 1.0),
            eaass: EaassConfig::default(),
            replications: 10,
            estimators: EstimatorKind::ALL.to_vec(),
            ise_grid_points: ISE_GRID_POINTS,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.replications < 1 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators requested".into()));
        }
        if self.deriv_s >= self.order || self.deriv_t >= self.order {
            return Err(Error::UnsupportedDerivative { deriv: self.deriv_s.max(self.deriv_t), order: self.order });
        }
        let (lo, hi, step) = self.smooth_ladder;
        if !(lo <= hi && step > 0.0) {
            return Err(Error::InvalidConfig("smooth ladder needs lo <= hi and a positive step".into()));
        }
        if self.ise_grid_points < 2 {
            return Err(Error::InvalidConfig("ISE grid needs at least two points".into()));
        }
        Ok(())
    }

    pub fn orders(&self) -> DerivOrders {
        DerivOrders { s: self.deriv_s, t: self.deriv_t }
    }

    pub fn bases(&self) -> Result<(BasisSystem, BasisSystem)> {
        Ok((
            BasisSystem::new(self.order, self.interior_knots_s, Domain::unit())?,
            BasisSystem::new(self.order, self.interior_knots_t, Domain::unit())?,
        ))
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        derive_seed(self.generation.seed, Stream::Replication, replication as u64)
    }
}

/// Metrics of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub ise: f64,
    pub pmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub estimator: Option<EstimatorKind>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_ise: f64,
    pub se_ise: f64,
    pub mean_pmse: f64,
    pub se_pmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub rows: Vec<ReplicationRow>,
    pub failures: Vec<Failure>,
    pub aggregate: Vec<AggregateRow>,
}

impl MonteCarloResult {
    pub fn aggregate_for(&self, estimator: EstimatorKind) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.estimator == estimator)
    }
}

/// Sample mean and standard error `sd / sqrt(len)`; the error is 0 for one value.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Generates one replication and fits every requested estimator. Per-estimator
/// failures are returned alongside the successful rows.
pub fn run_replication(
    scenario: Scenario,
    study: &StudyConfig,
    replication: usize,
) -> Result<(Vec<ReplicationRow>, Vec<Failure>)> {
    let seed = study.replication_seed(replication);
    let data = simulate(scenario, &study.generation, &mut rng_for(seed, Stream::Generation, 0))?;
    let (train_x, mean_x) = center(&data.train_x)?;
    let (train_y, mean_y) = center(&data.train_y)?;
    let test_x = data.test_x.subtract(&mean_x)?;
    let test_y = data.test_y.subtract(&mean_y)?;

    let (bs, bt) = study.bases()?;
    let orders = study.orders();
    let design = DesignMatrices::new(&train_x, &train_y, &bs, &bt)?;
    let plan = CvPlan::new(design.len(), study.cv_folds, derive_seed(seed, Stream::Folds, 0))?;
    let folds = CvFolds::new(&CvData::new(&train_x, &train_y, &bs, &bt)?, &plan)?;
    let score = |surface: &CoefficientSurface| -> Result<(f64, f64)> {
        let e = ise_with_grid(surface, |s, t| scenario.beta(s, t), study.ise_grid_points)?;
        let p = if test_x.is_empty() { f64::NAN } else { pmse(surface, &test_x, &test_y)? };
        Ok((e, p))
    };

    // the SMOOTH fit doubles as the pilot estimate for AdaSS
    let smooth = (|| {
        let (lo, hi, step) = study.smooth_ladder;
        let solver = SmoothSolver::new(&bs, &bt, orders)?;
        let best = tune_smooth(&solver, &log_ladder(lo, hi, step), &folds)?;
        fit_smooth(&design, &bs, &bt, best.best[0], best.best[1], orders)
    })();

    let template = PenaltySystem::on_knots(&bs, &bt, orders)?;
    let adaptive = |pilot: &DerivativeEstimates, index: u64| -> Result<CoefficientSurface> {
        let config = EaassConfig { seed: derive_seed(seed, Stream::Evolution, index), ..study.eaass.clone() };
        let outcome = eaass(&folds, &template, pilot, &config)?;
        let ps = template.with_adaptive_weights(pilot, &outcome.best)?;
        fit_adass(&design, &bs, &bt, &ps, &outcome.best)
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &kind in &study.estimators {
        let fitted: std::result::Result<CoefficientSurface, String> = match kind {
            EstimatorKind::Smooth => smooth.as_ref().cloned().map_err(|e| e.to_string()),
            EstimatorKind::Adass => match &smooth {
                Ok(s) => initial_derivatives(s, orders, template.grid_s(), template.grid_t())
                    .and_then(|pilot| adaptive(&pilot, 0))
                    .map_err(|e| e.to_string()),
                Err(e) => Err(format!("pilot fit failed: {e}")),
            },
            EstimatorKind::AdassTrue => {
                let pilot = DerivativeEstimates::from_fn(
                    template.grid_s(),
                    template.grid_t(),
                    |s, t| scenario.beta_ss(s, t),
                    |s, t| scenario.beta_tt(s, t),
                );
                adaptive(&pilot, 1).map_err(|e| e.to_string())
            }
        };
        match fitted.and_then(|s| score(&s).map_err(|e| e.to_string())) {
            Ok((ise, pmse)) => rows.push(ReplicationRow {
                scenario,
                estimator: kind,
                n: study.generation.n,
                replication,
                seed,
                ise,
                pmse,
            }),
            Err(message) => failures.push(Failure { replication, estimator: Some(kind), message }),
        }
    }
    Ok((rows, failures))
}

/// Runs every replication (concurrently) and aggregates per estimator.
pub fn run_monte_carlo(scenario: Scenario, study: &StudyConfig) -> Result<MonteCarloResult> {
    study.validate()?;
    let outcomes: Vec<_> =
        (0..study.replications).into_par_iter().map(|r| (r, run_replication(scenario, study, r))).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes {
        match outcome {
            Ok((mut ok, mut bad)) => {
                rows.append(&mut ok);
                failures.append(&mut bad);
            }
            Err(e) => failures.push(Failure { replication: r, estimator: None, message: e.to_string() }),
        }
    }
    if rows.is_empty() {
        return Err(Error::BenchmarkFailed(
            failures.iter().map(|f| f.message.clone()).take(3).collect::<Vec<_>>().join("; "),
        ));
    }
    let mut aggregate = Vec::new();
    for &kind in &study.estimators {
        let own: Vec<&ReplicationRow> = rows.iter().filter(|r| r.estimator == kind).collect();
        if own.is_empty() {
            continue;
        }
        let ises: Vec<f64> = own.iter().map(|r| r.ise).collect();
        let pmses: Vec<f64> = own.iter().map(|r| r.pmse).collect();
        let (mean_ise, se_ise) = mean_and_se(&ises);
        let (mean_pmse, se_pmse) = mean_and_se(&pmses);
        aggregate.push(AggregateRow {
            scenario,
            estimator: kind,
            n: study.generation.n,
            replications: own.len(),
            failures: study.replications - own.len(),
            mean_ise,
            se_ise,
            mean_pmse,
            se_pmse,
        });
    }
    Ok(MonteCarloResult { rows, failures, aggregate })
}

fn fmt_num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Columns `scenario,estimator,n,replication,seed,ise,pmse`.
pub fn write_replications_csv(path: impl AsRef<Path>, rows: &[ReplicationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["scenario", "estimator", "n", "replication", "seed", "ise", "pmse"])?;
    for r in rows {
        w.write_record([
            r.scenario.name().to_string(),
            r.estimator.name().to_string(),
            r.n.to_string(),
            r.replication.to_string(),
            r.seed.to_string(),
            fmt_num(r.ise),
            fmt_num(r.pmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `scenario,estimator,n,replications,failures,mean_ise,se_ise,mean_pmse,se_pmse`.
pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["scenario", "estimator", "n", "replications", "failures", "mean_ise", "se_ise", "mean_pmse", "se_pmse"])?;
    for r in rows {
        w.write_record([
            r.scenario.name().to_string(),
            r.estimator.name().to_string(),
            r.n.to_string(),
            r.replications.to_string(),
            r.failures.to_string(),
            fmt_num(r.mean_ise),
            fmt_num(r.se_ise),
            fmt_num(r.mean_pmse),
            fmt_num(r.se_pmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}
