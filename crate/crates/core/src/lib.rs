//! Adaptive smoothing spline (AdaSS) estimation of the coefficient surface in
//! the function-on-function linear model
//! `Y_i(t) = int X_i(s) beta(s, t) ds + eps_i(t)`.
//!
//! The crate provides the tensor-product B-spline machinery, the non-adaptive
//! smoothing spline estimator and its spatially adaptive counterpart, cross
//! validation with grid search and an evolutionary search over the six
//! adaptive tuning parameters, and the simulation generators used to
//! benchmark the estimators.

pub mod bspline;
pub mod error;
pub mod estimator;
pub mod fdata;
pub mod linalg;
pub mod quadrature;
pub mod seeds;
pub mod simgen;
pub mod tuning;

pub use bspline::{BasisSpec, BasisSystem, Domain, SubIntervalGrid};
pub use error::{Error, Result};
pub use estimator::{CoefficientSurface, PenaltySystem, TuningPoint};
pub use fdata::{DesignMatrices, FunctionalSample};
