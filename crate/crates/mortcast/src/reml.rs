//! REML smoothing-parameter selection and the fitted-model container.
//!
//! The criterion minimized over log smoothing parameters `rho = ln lambda`
//! is the (profiled, Gaussian) restricted likelihood
//!
//! ```text
//! score(rho) = (n - d)/2 * ln(rss + beta' S beta)
//!            + 1/2 * ln det(X'X + S)  -  1/2 * ln det+(S)
//! ```
//!
//! up to an additive constant, where `d` is the dimension of the total
//! penalty's nullspace (here: the parametric columns, since every smooth
//! penalty is full rank after shrinkage/ridge modification) and `det+` is
//! the product of strictly positive eigenvalues.

use crate::covariates::{
    attach_covariates, compute_covariates, CovariateError, CovariateSet, FrameRow, ModelFrame,
};
use crate::data::{Gender, MortalityPanel};
use crate::design::{Design, DesignError, ModelSpec, ModelTerms};
use crate::solver::{pls_solve, NormalEquations, SolverError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error("trimming would retain only {retained:.3} of rows (minimum {min})")]
    TooFewRetained { retained: f64, min: f64 },
    #[error("model file format version {found}, this build reads {expected}")]
    Format { expected: u32, found: u32 },
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Optimizer settings. Defaults follow the usual REML practice: BFGS with
/// central finite-difference gradients, log-lambda box constraints, and a
/// relative gradient stopping rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemlOptions {
    pub max_iter: usize,
    /// Absolute tolerance on the score decrease.
    pub tol: f64,
    /// Gradient tolerance, relative: converged when
    /// `|grad|_inf < grad_tol * (1 + |score|)`.
    pub grad_tol: f64,
    pub fd_step: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho0: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions {
            max_iter: 200,
            tol: 1e-6,
            grad_tol: 1e-3,
            fd_step: 1e-3,
            rho_min: -20.0,
            rho_max: 25.0,
            rho0: 0.0,
        }
    }
}

/// Log-determinant structure of `S_lambda` over one column span. Spans with
/// a single smoothing parameter reduce to `rank * rho + const`; spans where
/// several penalties overlap (factor smooths) are evaluated blockwise.
enum Span {
    Single {
        lambda_idx: usize,
        rank: f64,
        logdet: f64,
    },
    Multi {
        /// (lambda index, aligned per-block matrices).
        parts: Vec<(usize, Vec<nalgebra::DMatrix<f64>>)>,
        offsets: Vec<usize>,
    },
}

pub struct RemlProblem<'a> {
    design: &'a Design,
    pub ne: NormalEquations,
    nullspace_dim: usize,
    spans: Vec<Span>,
}

impl<'a> RemlProblem<'a> {
    pub fn new(design: &'a Design, nullspace_dim: usize) -> RemlProblem<'a> {
        let ne = NormalEquations::build(design);
        // Group penalties by identical column span.
        let mut by_span: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
            std::collections::BTreeMap::new();
        for (i, gp) in design.penalties.iter().enumerate() {
            by_span
                .entry((gp.col_offset, gp.penalty.dim))
                .or_default()
                .push(i);
        }
        let mut spans = Vec::new();
        for (_, idxs) in by_span {
            // Penalties sharing a span either tile it disjointly (one
            // per-level block each, like a by-factor smooth) or overlap on
            // identical blocks (factor smooths: roughness + nullspace
            // ridge). Disjoint ones factor into independent single-lambda
            // contributions.
            let aligned = idxs.len() > 1 && {
                let first: Vec<usize> = design.penalties[idxs[0]]
                    .penalty
                    .blocks
                    .iter()
                    .map(|b| b.offset)
                    .collect();
                idxs.iter().all(|&i| {
                    design.penalties[i]
                        .penalty
                        .blocks
                        .iter()
                        .map(|b| b.offset)
                        .collect::<Vec<_>>()
                        == first
                })
            };
            if aligned {
                let offsets: Vec<usize> = design.penalties[idxs[0]]
                    .penalty
                    .blocks
                    .iter()
                    .map(|b| b.offset)
                    .collect();
                let parts = idxs
                    .iter()
                    .map(|&i| {
                        let gp = &design.penalties[i];
                        (
                            gp.lambda_idx,
                            gp.penalty.blocks.iter().map(|b| b.mat.clone()).collect(),
                        )
                    })
                    .collect();
                spans.push(Span::Multi { parts, offsets });
            } else {
                for &i in &idxs {
                    let gp = &design.penalties[i];
                    let (rank, logdet) = gp.penalty.rank_and_logdet_plus(1e-10);
                    spans.push(Span::Single {
                        lambda_idx: gp.lambda_idx,
                        rank: rank as f64,
                        logdet,
                    });
                }
            }
        }
        RemlProblem {
            design,
            ne,
            nullspace_dim,
            spans,
        }
    }

    fn logdet_plus(&self, rho: &[f64], lambdas: &[f64]) -> f64 {
        let mut acc = 0.0;
        for span in &self.spans {
            match span {
                Span::Single {
                    lambda_idx,
                    rank,
                    logdet,
                } => acc += rank * rho[*lambda_idx] + logdet,
                Span::Multi { parts, offsets } => {
                    for b in 0..offsets.len() {
                        let k = parts[0].1[b].nrows();
                        let mut m = nalgebra::DMatrix::<f64>::zeros(k, k);
                        for (lidx, mats) in parts {
                            m += lambdas[*lidx] * &mats[b];
                        }
                        match m.clone().cholesky() {
                            Some(chol) => {
                                let l = chol.l();
                                for i in 0..k {
                                    acc += 2.0 * l[(i, i)].ln();
                                }
                            }
                            None => {
                                // Numerically semi-definite: fall back to
                                // the positive eigenvalues.
                                let eig = m.symmetric_eigen();
                                let max =
                                    eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
                                for &v in eig.eigenvalues.iter() {
                                    if v > 1e-12 * max.max(1e-300) {
                                        acc += v.ln();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        acc
    }

    pub fn score(&self, rho: &[f64]) -> f64 {
        let lambdas: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        match pls_solve(self.design, &self.ne, &lambdas) {
            Ok((fit, _)) => {
                let n = self.design.n as f64;
                let d = self.nullspace_dim as f64;
                0.5 * (n - d) * (fit.rss + fit.penalty_quad).ln() + 0.5 * fit.logdet_f
                    - 0.5 * self.logdet_plus(rho, &lambdas)
            }
            Err(_) => f64::INFINITY,
        }
    }

    /// Score at perturbed smoothing parameters, reusing a base
    /// factorization so that single-coordinate moves only refactor the
    /// touched column groups.
    fn score_perturbed(&self, base: &crate::solver::BaseFactor, rho: &[f64]) -> f64 {
        let lambdas: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        match self.ne.solve_perturbed(base, &lambdas) {
            Ok((logdet_f, beta)) => {
                let fitted = self.design.xv(&beta);
                let rss = (&self.design.y - fitted).norm_squared();
                let quad = self.ne.penalty_quad(&lambdas, &beta);
                let n = self.design.n as f64;
                let d = self.nullspace_dim as f64;
                0.5 * (n - d) * (rss + quad).ln() + 0.5 * logdet_f
                    - 0.5 * self.logdet_plus(rho, &lambdas)
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn grad(&self, rho: &[f64], h: f64) -> Vec<f64> {
        let lambdas: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        let base = match self.ne.base_factor(&lambdas) {
            Ok(b) => b,
            Err(_) => {
                // Not factorizable here; finite scores nearby still give a
                // usable direction through the plain path.
                return (0..rho.len())
                    .into_par_iter()
                    .map(|i| {
                        let mut rp = rho.to_vec();
                        let mut rm = rho.to_vec();
                        rp[i] += h;
                        rm[i] -= h;
                        (self.score(&rp) - self.score(&rm)) / (2.0 * h)
                    })
                    .collect();
            }
        };
        (0..rho.len())
            .into_par_iter()
            .map(|i| {
                let mut rp = rho.to_vec();
                let mut rm = rho.to_vec();
                rp[i] += h;
                rm[i] -= h;
                (self.score_perturbed(&base, &rp) - self.score_perturbed(&base, &rm))
                    / (2.0 * h)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub rho: Vec<f64>,
    pub score: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_inf: f64,
}

fn clamp_to_box(rho: &mut [f64], lo: f64, hi: f64) {
    for r in rho.iter_mut() {
        *r = r.clamp(lo, hi);
    }
}

/// Minimize the REML score with BFGS; gradients by central finite
/// differences, evaluated in parallel. Falls back to a golden-section probe
/// along the steepest-descent direction when the Armijo search stalls.
pub fn optimize_reml(problem: &RemlProblem, opts: &RemlOptions) -> OptimResult {
    optimize_from(problem, opts, vec![opts.rho0; problem.ne.n_lambdas])
}

/// `optimize_reml` with an explicit starting point (used for warm restarts
/// after trimming).
pub fn optimize_from(problem: &RemlProblem, opts: &RemlOptions, rho0: Vec<f64>) -> OptimResult {
    let mut rho = rho0;
    clamp_to_box(&mut rho, opts.rho_min, opts.rho_max);
    let f = problem.score(&rho);
    if rho.is_empty() {
        return OptimResult {
            rho,
            score: f,
            iterations: 0,
            converged: true,
            grad_inf: 0.0,
        };
    }
    optimize_body(problem, opts, rho, f)
}

/// A training observation dropped by residual trimming.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DroppedCell {
    pub country: String,
    pub gender: Gender,
    pub age: u32,
    pub year: i32,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrimInfo {
    pub threshold: f64,
    pub n_before: usize,
    pub n_retained: usize,
    pub retained_fraction: f64,
    pub dropped: Vec<DroppedCell>,
}

/// A fitted model: bound terms, coefficients, smoothing parameters, and the
/// training covariate series needed to forecast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: u32,
    pub terms: ModelTerms,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub score: f64,
    /// Residual variance `rss / (n - total edf)`.
    pub scale: f64,
    pub edf_total: f64,
    pub edf_by_term: Vec<(String, f64)>,
    pub n_train: usize,
    pub converged: bool,
    pub iterations: usize,
    pub split_age: u32,
    pub train_year_min: i32,
    pub train_year_max: i32,
    pub covariates: CovariateSet,
    pub trim: Option<TrimInfo>,
}

impl FittedModel {
    pub fn predict(&self, rows: &[FrameRow]) -> Result<Vec<f64>, DesignError> {
        self.terms.predict(rows, &self.beta)
    }

    pub fn to_json(&self) -> Result<String, FitError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<FittedModel, FitError> {
        #[derive(Deserialize)]
        struct VersionProbe {
            version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != MODEL_FORMAT_VERSION {
            return Err(FitError::Format {
                expected: MODEL_FORMAT_VERSION,
                found: probe.version,
            });
        }
        let mut model: FittedModel = serde_json::from_str(text)?;
        model.terms.rebuild_penalties()?;
        Ok(model)
    }
}

fn finish_fit(
    frame: &ModelFrame,
    terms: ModelTerms,
    design: &Design,
    problem: &RemlProblem,
    optim: OptimResult,
    cov: &CovariateSet,
    trim: Option<TrimInfo>,
) -> Result<FittedModel, FitError> {
    let lambdas: Vec<f64> = optim.rho.iter().map(|r| r.exp()).collect();
    let (fit, fact) = pls_solve(design, &problem.ne, &lambdas)?;
    let edf_cols = fact.edf_per_column(&problem.ne, &lambdas);
    let edf_total: f64 = edf_cols.iter().sum();
    let edf_by_term = design
        .term_cols
        .iter()
        .map(|(name, (a, b))| (name.clone(), edf_cols[*a..*b].iter().sum()))
        .collect();
    let scale = fit.rss / (design.n as f64 - edf_total);
    Ok(FittedModel {
        version: MODEL_FORMAT_VERSION,
        terms,
        beta: fit.beta.iter().cloned().collect(),
        rho: optim.rho,
        score: optim.score,
        scale,
        edf_total,
        edf_by_term,
        n_train: design.n,
        converged: optim.converged,
        iterations: optim.iterations,
        split_age: frame.split_age,
        train_year_min: frame.year_min,
        train_year_max: frame.year_max,
        covariates: cov.clone(),
        trim,
    })
}

/// Fit a model to a covariate-attached frame.
pub fn fit_frame(
    frame: &ModelFrame,
    cov: &CovariateSet,
    spec: &ModelSpec,
    opts: &RemlOptions,
) -> Result<FittedModel, FitError> {
    let terms = ModelTerms::build(frame, spec)?;
    let design = terms.design(frame, false)?;
    let problem = RemlProblem::new(&design, terms.parametric_cols);
    let optim = optimize_reml(&problem, opts);
    finish_fit(frame, terms, &design, &problem, optim, cov, None)
}

/// Compute covariates from a panel and fit.
pub fn fit_panel(
    panel: &MortalityPanel,
    spec: &ModelSpec,
    split_age: u32,
    opts: &RemlOptions,
) -> Result<FittedModel, FitError> {
    let cov = compute_covariates(panel, split_age)?;
    let frame = attach_covariates(panel, &cov)?;
    fit_frame(&frame, &cov, spec, opts)
}

/// Drop training rows with `|residual| > threshold` and refit on the rest,
/// reusing the already-bound terms (same knots, same centering, same factor
/// tables) and restarting the optimizer from the previous solution.
pub fn trim_refit(
    model: &FittedModel,
    frame: &ModelFrame,
    threshold: f64,
    min_retained: f64,
    opts: &RemlOptions,
) -> Result<FittedModel, FitError> {
    let fitted = model.predict(&frame.rows)?;
    let mut retained = Vec::with_capacity(frame.rows.len());
    let mut dropped = Vec::new();
    for (row, fit) in frame.rows.iter().zip(&fitted) {
        let r = row.y - fit;
        if r.abs() > threshold {
            dropped.push(DroppedCell {
                country: row.country.clone(),
                gender: row.gender,
                age: row.age,
                year: row.year,
                residual: r,
            });
        } else {
            retained.push(row.clone());
        }
    }
    let fraction = retained.len() as f64 / frame.rows.len() as f64;
    if fraction < min_retained {
        return Err(FitError::TooFewRetained {
            retained: fraction,
            min: min_retained,
        });
    }
    let sub = ModelFrame {
        rows: retained,
        countries: frame.countries.clone(),
        omega: frame.omega,
        split_age: frame.split_age,
        year_min: frame.year_min,
        year_max: frame.year_max,
    };
    let terms = model.terms.clone();
    let design = terms.design(&sub, true)?;
    let problem = RemlProblem::new(&design, terms.parametric_cols);
    let optim = optimize_from(&problem, opts, model.rho.clone());
    let trim = TrimInfo {
        threshold,
        n_before: frame.rows.len(),
        n_retained: sub.rows.len(),
        retained_fraction: fraction,
        dropped,
    };
    finish_fit(&sub, terms, &design, &problem, optim, &model.covariates, Some(trim))
}

fn optimize_body(
    problem: &RemlProblem,
    opts: &RemlOptions,
    rho_init: Vec<f64>,
    f_init: f64,
) -> OptimResult {
    let m = rho_init.len();
    let mut rho = rho_init;
    let mut f = f_init;
    let mut h_inv = nalgebra::DMatrix::<f64>::identity(m, m);
    let mut g = nalgebra::DVector::from_vec(problem.grad(&rho, opts.fd_step));
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        // The declared stopping rule (score change below `tol` AND relative
        // gradient below `grad_tol`) is checked after each accepted step;
        // here we only bail out on an essentially exact stationary point.
        if g.amax() < 1e-8 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = nalgebra::DMatrix::identity(m, m);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut alpha = 1.0;
        let mut new_rho = rho.clone();
        let mut new_f = f;
        let mut improved = false;
        for _ in 0..40 {
            let mut trial: Vec<f64> =
                rho.iter().zip(dir.iter()).map(|(r, d)| r + alpha * d).collect();
            clamp_to_box(&mut trial, opts.rho_min, opts.rho_max);
            let ft = problem.score(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                new_rho = trial;
                new_f = ft;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            let dir2 = -g.clone();
            let probe = |a: f64| {
                let mut t: Vec<f64> =
                    rho.iter().zip(dir2.iter()).map(|(r, d)| r + a * d).collect();
                clamp_to_box(&mut t, opts.rho_min, opts.rho_max);
                (problem.score(&t), t)
            };
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (0.0f64, 1.0f64 / (1.0 + g.amax()));
            let (mut x1, mut x2) = (b - phi * (b - a), a + phi * (b - a));
            let (mut f1, mut f2) = (probe(x1).0, probe(x2).0);
            for _ in 0..30 {
                if f1 < f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = probe(x1).0;
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = probe(x2).0;
                }
            }
            let (fb, tb) = probe(0.5 * (a + b));
            if fb < f {
                new_rho = tb;
                new_f = fb;
                improved = true;
                h_inv = nalgebra::DMatrix::identity(m, m);
            }
        }
        if !improved {
            converged = true; // no descent direction left at this resolution
            break;
        }
        let g_new = nalgebra::DVector::from_vec(problem.grad(&new_rho, opts.fd_step));
        let delta = f - new_f;
        let s = nalgebra::DVector::from_iterator(
            m,
            new_rho.iter().zip(&rho).map(|(a, b)| a - b),
        );
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            let r = 1.0 / sy;
            h_inv.ger((sy + yhy) * r * r, &s, &s, 1.0);
            h_inv.ger(-r, &hy, &s, 1.0);
            h_inv.ger(-r, &s, &hy, 1.0);
        }
        rho = new_rho;
        f = new_f;
        g = g_new;
        if delta.abs() < opts.tol && g.amax() < opts.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }
    OptimResult {
        grad_inf: g.amax(),
        rho,
        score: f,
        iterations,
        converged,
    }
}
