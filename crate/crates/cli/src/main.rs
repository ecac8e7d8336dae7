//! `adass` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use adass::simgen::EstimatorKind;
use adass::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{Method, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "adass", version, about = "Adaptive smoothing splines for function-on-function regression")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the configuration file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file (a manifest from an earlier run works too).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and test sets for a scenario.
    Simulate {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Fit a coefficient surface to paired curves.
    Fit(FitArgs),
    /// Select tuning parameters by cross validation without writing a surface.
    Tune(FitArgs),
    /// Predict responses for new predictor curves.
    Predict {
        #[arg(long)]
        surface: Option<PathBuf>,
        #[arg(long)]
        x: Option<PathBuf>,
    },
    /// Monte Carlo comparison of the estimators.
    Benchmark {
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated training sizes.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated subset of SMOOTH, AdaSS, AdaSStrue.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        #[arg(long)]
        n_test: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    /// Predictor curves (long-format CSV).
    #[arg(long)]
    x: Option<PathBuf>,
    /// Response curves (long-format CSV).
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    gamma_s: Option<f64>,
    #[arg(long)]
    gamma_t: Option<f64>,
    #[arg(long)]
    delta_star_s: Option<f64>,
    #[arg(long)]
    delta_star_t: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
}

fn resolve(cli: Cli) -> Result<(&'static str, RunConfig)> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.common.out {
        cfg.out = out;
    }
    if let Some(threads) = cli.common.threads {
        cfg.threads = threads;
    }
    let name = match cli.command {
        Command::Simulate { scenario, n, n_test } => {
            let sim = &mut cfg.simulate;
            set(&mut sim.scenario, scenario);
            set(&mut sim.generation.n, n);
            set(&mut sim.generation.n_test, n_test);
            "simulate"
        }
        Command::Fit(args) => {
            args.apply(&mut cfg);
            "fit"
        }
        Command::Tune(args) => {
            args.apply(&mut cfg);
            "tune"
        }
        Command::Predict { surface, x } => {
            cfg.predict.surface = surface.or(cfg.predict.surface);
            cfg.predict.x = x.or(cfg.predict.x);
            "predict"
        }
        Command::Benchmark { scenario, n, replications, estimators, n_test } => {
            let b = &mut cfg.benchmark;
            set(&mut b.scenario, scenario);
            set(&mut b.sample_sizes, n);
            set(&mut b.replications, replications);
            set(&mut b.generation.n_test, n_test);
            if let Some(names) = estimators {
                b.estimators = names.iter().map(|e| e.parse()).collect::<Result<Vec<EstimatorKind>>>()?;
            }
            "benchmark"
        }
    };
    cfg.command = name.to_string();
    Ok((name, cfg))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FitArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let fit = &mut cfg.fit;
        fit.x = self.x.or(fit.x.take());
        fit.y = self.y.or(fit.y.take());
        set(&mut fit.method, self.method);
        for (slot, v) in [
            (&mut fit.lambda_s, self.lambda_s),
            (&mut fit.lambda_t, self.lambda_t),
            (&mut fit.gamma_s, self.gamma_s),
            (&mut fit.gamma_t, self.gamma_t),
            (&mut fit.delta_star_s, self.delta_star_s),
            (&mut fit.delta_star_t, self.delta_star_t),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        set(&mut cfg.cv.folds, self.folds);
    }
}

fn main() -> ExitCode {
    let outcome = resolve(Cli::parse()).and_then(|(name, cfg)| commands::run(name, &cfg));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error code={}: {}", e.code(), message);
            ExitCode::FAILURE
        }
    }
}
