//! Mortality modelling and forecasting toolkit.
//!
//! Builds age-specific death rate (ASDR) panels from HMD-style input,
//! derives the mortality covariates `k_t` and `k_ct`, fits penalized-spline
//! GAMMs with REML-selected smoothing parameters, trims large residuals and
//! refits, forecasts covariates by random walks with drift, and benchmarks
//! the result against Lee-Carter and Li-Lee baselines.

pub mod baselines;
pub mod basis;
pub mod covariates;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod eval;
pub mod forecast;
pub mod reml;
pub mod solver;

pub use data::{Gender, MortalityPanel, MortalityTable, PanelRecord};
pub use design::{ModelSpec, ModelTerms};
pub use reml::FittedModel;

