//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use adass::simgen::{EstimatorKind, GenConfig, StudyConfig};
use adass::tuning::EaassConfig;
use adass::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced a manifest; ignored when read back.
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub basis: BasisConfig,
    pub cv: CvConfig,
    pub smooth: SmoothConfig,
    pub eaass: EaassConfig,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub predict: PredictConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
            basis: BasisConfig::default(),
            cv: CvConfig::default(),
            smooth: SmoothConfig::default(),
            eaass: EaassConfig::default(),
            simulate: SimulateConfig::default(),
            fit: FitConfig::default(),
            predict: PredictConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub order: usize,
    pub interior_knots_s: usize,
    pub interior_knots_t: usize,
    pub deriv_s: usize,
    pub deriv_t: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { order: 4, interior_knots_s: 20, interior_knots_t: 20, deriv_s: 2, deriv_t: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

/// Decimal exponents of the SMOOTH grid-search ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    pub ladder_lo: f64,
    pub ladder_hi: f64,
    pub ladder_step: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { ladder_lo: -8.0, ladder_hi: 2.0, ladder_step: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: String,
    pub generation: GenConfig,
    pub beta_grid_points: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { scenario: "mexican_hat".into(), generation: GenConfig::default(), beta_grid_points: 101 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Smooth,
    Adass,
}

/// Inputs and optional fixed tuning parameters for `fit` and `tune`. Unset
/// parameters are searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub curve_column: String,
    pub arg_column: String,
    pub value_column: String,
    pub method: Method,
    pub lambda_s: Option<f64>,
    pub lambda_t: Option<f64>,
    pub gamma_s: Option<f64>,
    pub gamma_t: Option<f64>,
    pub delta_star_s: Option<f64>,
    pub delta_star_t: Option<f64>,
    pub slice_points: usize,
    /// Positions along the `t` domain, as fractions in `[0, 1]`, of the
    /// written `beta(., t)` slices.
    pub slice_fractions: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            x: None,
            y: None,
            curve_column: "curve".into(),
            arg_column: "arg".into(),
            value_column: "value".into(),
            method: Method::Adass,
            lambda_s: None,
            lambda_t: None,
            gamma_s: None,
            gamma_t: None,
            delta_star_s: None,
            delta_star_t: None,
            slice_points: 101,
            slice_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub surface: Option<PathBuf>,
    pub x: Option<PathBuf>,
    pub t_points: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { surface: None, x: None, t_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenario: String,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    pub generation: GenConfig,
    pub ise_grid_points: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenario: "mexican_hat".into(),
            sample_sizes: vec![100],
            replications: 10,
            estimators: EstimatorKind::ALL.to_vec(),
            generation: GenConfig::default(),
            ise_grid_points: adass::estimator::ISE_GRID_POINTS,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", p.display(), e.message())))
            }
        }
    }

    pub fn to_manifest(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize manifest: {e}")))
    }

    /// Study settings for `benchmark` at sample size `n`.
    pub fn study(&self, n: usize) -> StudyConfig {
        StudyConfig {
            generation: GenConfig { n, seed: self.seed, ..self.benchmark.generation.clone() },
            order: self.basis.order,
            interior_knots_s: self.basis.interior_knots_s,
            interior_knots_t: self.basis.interior_knots_t,
            deriv_s: self.basis.deriv_s,
            deriv_t: self.basis.deriv_t,
            cv_folds: self.cv.folds,
            smooth_ladder: (self.smooth.ladder_lo, self.smooth.ladder_hi, self.smooth.ladder_step),
            eaass: self.eaass.clone(),
            replications: self.benchmark.replications,
            estimators: self.benchmark.estimators.clone(),
            ise_grid_points: self.benchmark.ise_grid_points,
        }
    }
}
