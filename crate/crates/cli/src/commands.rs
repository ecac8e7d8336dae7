//! Subcommand implementations. Each writes its artifacts into the output
//! directory and finishes with `manifest.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use adass::bspline::BasisSystem;
use adass::estimator::{
    fit_adass, fit_smooth, initial_derivatives, predict, CoefficientSurface, DerivOrders, DerivativeEstimates,
    PenaltySystem, SmoothSolver, SurfaceRecord, TuningPoint,
};
use adass::fdata::{center, load_csv, write_csv, DesignMatrices, FunctionalSample};
use adass::quadrature::linspace;
use adass::seeds::{derive_seed, rng_for, Stream};
use adass::simgen::{
    run_monte_carlo, simulate, write_aggregate_csv, write_beta_grid_csv, write_replications_csv, Failure, GenConfig,
    Scenario,
};
use adass::tuning::{
    cv_error, eaass, grid_search, log_ladder, write_history_csv, CvData, CvFolds, CvPlan, EaassConfig, GridSearchResult,
    MemberRecord, ParamRange, PenalizedFit, Scale, SmoothFit,
};
use adass::{Error, Result};
use serde::Serialize;

use crate::config::{Method, RunConfig};

pub fn run(name: &str, cfg: &RunConfig) -> Result<()> {
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cfg.out)?;
    match name {
        "simulate" => cmd_simulate(cfg)?,
        "fit" => cmd_fit(cfg, true)?,
        "tune" => cmd_fit(cfg, false)?,
        "predict" => cmd_predict(cfg)?,
        "benchmark" => cmd_benchmark(cfg)?,
        other => return Err(Error::InvalidConfig(format!("unknown command {other}"))),
    }
    fs::write(cfg.out.join("manifest.toml"), cfg.to_manifest()?)?;
    Ok(())
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let scenario: Scenario = cfg.simulate.scenario.parse()?;
    let generation = GenConfig { seed: cfg.seed, ..cfg.simulate.generation.clone() };
    let data = simulate(scenario, &generation, &mut rng_for(cfg.seed, Stream::Generation, 0))?;
    let out = &cfg.out;
    write_csv(out.join("train_x.csv"), &data.train_x)?;
    write_csv(out.join("train_y.csv"), &data.train_y)?;
    write_csv(out.join("test_x.csv"), &data.test_x)?;
    write_csv(out.join("test_y.csv"), &data.test_y)?;
    write_beta_grid_csv(out.join("beta_grid.csv"), scenario, cfg.simulate.beta_grid_points)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        scenario: &'a str,
        noise_scale: f64,
    }
    write_json(out.join("simulation.json"), &Summary { scenario: scenario.name(), noise_scale: data.noise_scale })
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::InvalidConfig(format!("missing {what}")))
}

/// Centered training data with everything the tuning searches need.
struct Prepared {
    basis_s: BasisSystem,
    basis_t: BasisSystem,
    orders: DerivOrders,
    design: DesignMatrices,
    folds: CvFolds,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let fit = &cfg.fit;
    let x = load_csv(require(&fit.x, "predictor CSV (--x)")?, &fit.curve_column, &fit.arg_column, &fit.value_column)?;
    let y = load_csv(require(&fit.y, "response CSV (--y)")?, &fit.curve_column, &fit.arg_column, &fit.value_column)?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} predictor curves but {} responses", x.len(), y.len())));
    }
    let (xc, _) = center(&x)?;
    let (yc, _) = center(&y)?;
    let b = &cfg.basis;
    let basis_s = BasisSystem::new(b.order, b.interior_knots_s, x.domain())?;
    let basis_t = BasisSystem::new(b.order, b.interior_knots_t, y.domain())?;
    let orders = DerivOrders { s: b.deriv_s, t: b.deriv_t };
    let design = DesignMatrices::new(&xc, &yc, &basis_s, &basis_t)?;
    let plan = CvPlan::new(xc.len(), cfg.cv.folds, derive_seed(cfg.seed, Stream::Folds, 0))?;
    let folds = CvFolds::new(&CvData::new(&xc, &yc, &basis_s, &basis_t)?, &plan)?;
    Ok(Prepared { basis_s, basis_t, orders, design, folds })
}

enum SearchLog {
    None,
    Grid(GridSearchResult),
    Evolution(Vec<MemberRecord>),
}

fn ladder(cfg: &RunConfig) -> Vec<f64> {
    log_ladder(cfg.smooth.ladder_lo, cfg.smooth.ladder_hi, cfg.smooth.ladder_step)
}

/// Grid search over whichever of the two roughness parameters is unset.
fn smooth_search(cfg: &RunConfig, p: &Prepared, solver: &SmoothSolver) -> Result<GridSearchResult> {
    let grid = |fixed: Option<f64>| fixed.map_or_else(|| ladder(cfg), |v| vec![v]);
    grid_search(
        |v: &[f64]| Ok(SmoothFit { solver, lambda_s: v[0], lambda_t: v[1] }),
        &[grid(cfg.fit.lambda_s), grid(cfg.fit.lambda_t)],
        &p.folds,
    )
}

fn select_and_fit(cfg: &RunConfig, p: &Prepared) -> Result<(TuningPoint, CoefficientSurface, SearchLog)> {
    let fit = &cfg.fit;
    let (bs, bt) = (&p.basis_s, &p.basis_t);
    let solver = SmoothSolver::new(bs, bt, p.orders)?;
    if fit.method == Method::Smooth {
        let search = smooth_search(cfg, p, &solver)?;
        let (ls, lt) = (search.best[0], search.best[1]);
        let tuning = TuningPoint { cv_error: Some(search.error), ..TuningPoint::smooth(ls, lt) };
        let surface = fit_smooth(&p.design, bs, bt, ls, lt, p.orders)?;
        let log = if search.evaluations.len() > 1 { SearchLog::Grid(search) } else { SearchLog::None };
        return Ok((tuning, surface, log));
    }

    let template = PenaltySystem::on_knots(bs, bt, p.orders)?;
    let fixed = match (fit.lambda_s, fit.lambda_t) {
        (Some(ls), Some(lt)) => Some(TuningPoint {
            lambda_s: ls,
            delta_star_s: fit.delta_star_s.unwrap_or(0.0),
            gamma_s: fit.gamma_s.unwrap_or(0.0),
            lambda_t: lt,
            delta_star_t: fit.delta_star_t.unwrap_or(0.0),
            gamma_t: fit.gamma_t.unwrap_or(0.0),
            cv_error: None,
        }),
        _ => None,
    };
    let needs_pilot = fixed.is_none_or(|t| t.gamma_s > 0.0 || t.gamma_t > 0.0);
    let pilot = if needs_pilot {
        let pilot_cfg = RunConfig { fit: Default::default(), ..cfg.clone() };
        let search = smooth_search(&pilot_cfg, p, &solver)?;
        let smooth = fit_smooth(&p.design, bs, bt, search.best[0], search.best[1], p.orders)?;
        initial_derivatives(&smooth, p.orders, template.grid_s(), template.grid_t())?
    } else {
        // unit weights regardless of the pilot when both gammas are zero
        DerivativeEstimates::from_fn(template.grid_s(), template.grid_t(), |_, _| 0.0, |_, _| 0.0)
    };

    let (tuning, log) = match fixed {
        Some(t) => {
            let ps = template.with_adaptive_weights(&pilot, &t)?;
            let error = cv_error(&PenalizedFit::new(&ps, &t)?, &p.folds)?;
            (TuningPoint { cv_error: Some(error), ..t }, SearchLog::None)
        }
        None => {
            let mut config = EaassConfig { seed: derive_seed(cfg.seed, Stream::Evolution, 0), ..cfg.eaass.clone() };
            let pin = |range: &mut ParamRange, value: Option<f64>| {
                if let Some(v) = value {
                    *range = ParamRange { lo: v, hi: v, scale: Scale::Linear };
                }
            };
            let r = &mut config.ranges;
            pin(&mut r.lambda_s, fit.lambda_s);
            pin(&mut r.lambda_t, fit.lambda_t);
            pin(&mut r.gamma_s, fit.gamma_s);
            pin(&mut r.gamma_t, fit.gamma_t);
            pin(&mut r.delta_star_s, fit.delta_star_s);
            pin(&mut r.delta_star_t, fit.delta_star_t);
            let outcome = eaass(&p.folds, &template, &pilot, &config)?;
            (outcome.best, SearchLog::Evolution(outcome.records))
        }
    };
    let ps = template.with_adaptive_weights(&pilot, &tuning)?;
    let surface = fit_adass(&p.design, bs, bt, &ps, &tuning)?;
    Ok((tuning, surface, log))
}

fn write_grid_csv(path: PathBuf, search: &GridSearchResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda_s", "lambda_t", "cv_error"])?;
    for (params, error) in &search.evaluations {
        let e = error.as_ref().map(|v| v.to_string()).unwrap_or_default();
        w.write_record([params[0].to_string(), params[1].to_string(), e])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, write_surface: bool) -> Result<()> {
    let prepared = prepare(cfg)?;
    let (tuning, surface, log) = select_and_fit(cfg, &prepared)?;
    let out = &cfg.out;
    match log {
        SearchLog::Grid(search) => write_grid_csv(out.join("grid_search.csv"), &search)?,
        SearchLog::Evolution(records) => write_history_csv(out.join("history.csv"), &records)?,
        SearchLog::None => {}
    }
    write_json(out.join("tuning.json"), &tuning)?;
    if write_surface {
        write_json(out.join("surface.json"), &surface.to_record())?;
        let (ds, dt) = (surface.basis_s().domain(), surface.basis_t().domain());
        let s_grid = linspace(ds.start, ds.end, cfg.fit.slice_points.max(2));
        let ts: Vec<f64> = cfg
            .fit
            .slice_fractions
            .iter()
            .map(|f| {
                if (0.0..=1.0).contains(f) {
                    Ok(dt.start + f * dt.length())
                } else {
                    Err(Error::InvalidConfig(format!("slice fraction {f} outside [0, 1]")))
                }
            })
            .collect::<Result<_>>()?;
        surface.write_slices_csv(out.join("slices.csv"), &s_grid, &ts)?;
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let text = fs::read_to_string(require(&cfg.predict.surface, "surface file (--surface)")?)?;
    let record: SurfaceRecord =
        serde_json::from_str(&text).map_err(|e| Error::Parse { row: e.line(), message: e.to_string() })?;
    let surface = CoefficientSurface::from_record(&record)?;
    let fit = &cfg.fit;
    let x = load_csv(require(&cfg.predict.x, "predictor CSV (--x)")?, &fit.curve_column, &fit.arg_column, &fit.value_column)?;
    let dt = surface.basis_t().domain();
    let t_grid = linspace(dt.start, dt.end, cfg.predict.t_points.max(2));
    let values = predict(&surface, &x, &t_grid)?;
    write_csv(cfg.out.join("predictions.csv"), &FunctionalSample::new(t_grid, values, dt)?)
}

fn write_failures_csv(path: PathBuf, failures: &[(usize, Failure)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "replication", "estimator", "message"])?;
    for (n, f) in failures {
        let estimator = f.estimator.map(|e| e.name().to_string()).unwrap_or_default();
        w.write_record([n.to_string(), f.replication.to_string(), estimator, f.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    let scenario: Scenario = cfg.benchmark.scenario.parse()?;
    if cfg.benchmark.sample_sizes.is_empty() {
        return Err(Error::InvalidConfig("no sample sizes requested".into()));
    }
    let (mut rows, mut aggregate, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &cfg.benchmark.sample_sizes {
        let result = run_monte_carlo(scenario, &cfg.study(n))?;
        rows.extend(result.rows);
        aggregate.extend(result.aggregate);
        failures.extend(result.failures.into_iter().map(|f| (n, f)));
    }
    write_replications_csv(cfg.out.join("replications.csv"), &rows)?;
    write_aggregate_csv(cfg.out.join("aggregate.csv"), &aggregate)?;
    write_failures_csv(cfg.out.join("failures.csv"), &failures)
}
