//! Lee-Carter and Li-Lee reference models for benchmarking.

use crate::data::{Gender, MortalityPanel};
use crate::forecast::{rwd_fit, rwd_forecast, ForecastError};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no records for {country}/{gender}")]
    EmptyPopulation { country: String, gender: Gender },
    #[error("age {age} has no observed rates in any year; cannot impute")]
    EmptyAgeRow { age: u32 },
    #[error("centered log-rate matrix is numerically zero; factors are degenerate")]
    Degenerate,
    #[error("need at least 2 populations, found {found}")]
    TooFewPopulations { found: usize },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// Lee-Carter factors: log m(x,t) ~ a_x + b_x * kappa_t with the usual
/// identification constraints sum(b) = 1 and sum(kappa) = 0.
#[derive(Debug, Clone)]
pub struct LeeCarterFit {
    pub ages: Vec<u32>,
    pub years: Vec<i32>,
    pub a_x: Vec<f64>,
    pub b_x: Vec<f64>,
    pub kappa_t: Vec<f64>,
    /// Cells filled in by within-age interpolation before fitting.
    pub imputed_cells: usize,
}

/// Complete age x year log-rate matrix for one population-gender,
/// imputing missing cells by linear interpolation within each age row
/// (flat extension at the ends). Returns (matrix, years, imputed count).
fn log_rate_matrix(
    panel: &MortalityPanel,
    country: &str,
    gender: Gender,
) -> Result<(DMatrix<f64>, Vec<i32>, usize), BaselineError> {
    let mut by_cell: BTreeMap<(u32, i32), f64> = BTreeMap::new();
    for r in &panel.records {
        if r.country == country && r.gender == gender {
            by_cell.insert((r.age, r.year), r.log_rate);
        }
    }
    if by_cell.is_empty() {
        return Err(BaselineError::EmptyPopulation {
            country: country.to_string(),
            gender,
        });
    }
    let years: Vec<i32> = (panel.year_min..=panel.year_max).collect();
    let n_ages = panel.omega as usize + 1;
    let mut m = DMatrix::zeros(n_ages, years.len());
    let mut imputed = 0usize;
    for age in 0..=panel.omega {
        let known: Vec<(usize, f64)> = years
            .iter()
            .enumerate()
            .filter_map(|(j, &y)| by_cell.get(&(age, y)).map(|&v| (j, v)))
            .collect();
        if known.is_empty() {
            return Err(BaselineError::EmptyAgeRow { age });
        }
        for j in 0..years.len() {
            let v = match known.binary_search_by_key(&j, |&(k, _)| k) {
                Ok(idx) => known[idx].1,
                Err(ins) => {
                    imputed += 1;
                    if ins == 0 {
                        known[0].1
                    } else if ins == known.len() {
                        known[known.len() - 1].1
                    } else {
                        let (j0, v0) = known[ins - 1];
                        let (j1, v1) = known[ins];
                        v0 + (v1 - v0) * (j - j0) as f64 / (j1 - j0) as f64
                    }
                }
            };
            m[(age as usize, j)] = v;
        }
    }
    Ok((m, years, imputed))
}

/// Rank-1 SVD of a centered matrix with Lee-Carter normalization.
/// Returns (b, kappa) with sum(b) = 1, sum(kappa) = 0.
fn leading_factor(centered: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>), BaselineError> {
    let svd = centered.clone().svd(true, true);
    let s0 = svd.singular_values[0];
    if s0 < 1e-12 * (1.0 + centered.amax()) || s0 == 0.0 {
        return Err(BaselineError::Degenerate);
    }
    let u = svd.u.as_ref().unwrap().column(0);
    let v = svd.v_t.as_ref().unwrap().row(0);
    let b_sum: f64 = u.iter().sum();
    if b_sum.abs() < 1e-12 {
        return Err(BaselineError::Degenerate);
    }
    let b: Vec<f64> = u.iter().map(|&x| x / b_sum).collect();
    let kappa: Vec<f64> = v.iter().map(|&x| x * s0 * b_sum).collect();
    Ok((b, kappa))
}

pub fn lee_carter_fit(
    panel: &MortalityPanel,
    country: &str,
    gender: Gender,
) -> Result<LeeCarterFit, BaselineError> {
    let (m, years, imputed_cells) = log_rate_matrix(panel, country, gender)?;
    lee_carter_on_matrix(&m, &years, imputed_cells)
}

fn lee_carter_on_matrix(
    m: &DMatrix<f64>,
    years: &[i32],
    imputed_cells: usize,
) -> Result<LeeCarterFit, BaselineError> {
    let n_years = years.len() as f64;
    let a_x: Vec<f64> = (0..m.nrows())
        .map(|i| m.row(i).iter().sum::<f64>() / n_years)
        .collect();
    let mut centered = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            centered[(i, j)] -= a_x[i];
        }
    }
    let (b_x, mut kappa_t) = leading_factor(&centered)?;
    // Column means are 0 after row centering only in the balanced case;
    // enforce sum(kappa) = 0 exactly by shifting into a_x.
    let k_mean = kappa_t.iter().sum::<f64>() / n_years;
    let a_x: Vec<f64> = a_x
        .iter()
        .zip(&b_x)
        .map(|(&a, &b)| a + b * k_mean)
        .collect();
    for k in kappa_t.iter_mut() {
        *k -= k_mean;
    }
    Ok(LeeCarterFit {
        ages: (0..m.nrows() as u32).collect(),
        years: years.to_vec(),
        a_x,
        b_x,
        kappa_t,
        imputed_cells,
    })
}

impl LeeCarterFit {
    pub fn log_rate(&self, age: u32, year_idx: usize) -> f64 {
        self.a_x[age as usize] + self.b_x[age as usize] * self.kappa_t[year_idx]
    }

    fn kappa_series(&self) -> BTreeMap<i32, f64> {
        self.years
            .iter()
            .cloned()
            .zip(self.kappa_t.iter().cloned())
            .collect()
    }
}

/// Project kappa by a random walk with drift and rebuild log rates.
/// Returns (age, year) -> predicted log rate for the horizon years.
pub fn lee_carter_forecast(
    fit: &LeeCarterFit,
    horizon: usize,
) -> Result<BTreeMap<(u32, i32), f64>, BaselineError> {
    let rwd = rwd_fit(&fit.kappa_series())?;
    let kappa_fc = rwd_forecast(&rwd, horizon);
    let mut out = BTreeMap::new();
    for (&year, &kappa) in &kappa_fc {
        for &age in &fit.ages {
            out.insert(
                (age, year),
                fit.a_x[age as usize] + fit.b_x[age as usize] * kappa,
            );
        }
    }
    Ok(out)
}

/// Li-Lee factors for one gender across countries: the pooled stage gives
/// the common (B_x, K_t); each country then gets a residual Lee-Carter
/// pair (b_xc, k_tc) on log m - a_xc - B_x K_t.
#[derive(Debug, Clone)]
pub struct LiLeeFit {
    pub countries: Vec<String>,
    pub gender: Gender,
    pub years: Vec<i32>,
    pub b_common: Vec<f64>,
    pub k_common: Vec<f64>,
    /// Per country: (a_xc, b_xc, k_tc).
    pub residual: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub imputed_cells: usize,
}

pub fn li_lee_fit(panel: &MortalityPanel, gender: Gender) -> Result<LiLeeFit, BaselineError> {
    if panel.countries.len() < 2 {
        return Err(BaselineError::TooFewPopulations {
            found: panel.countries.len(),
        });
    }
    let mut mats = Vec::new();
    let mut years_ref: Vec<i32> = Vec::new();
    let mut imputed_cells = 0usize;
    for country in &panel.countries {
        let (m, years, imp) = log_rate_matrix(panel, country, gender)?;
        imputed_cells += imp;
        years_ref = years;
        mats.push(m);
    }
    // Stage 1: Lee-Carter on the average of the population matrices.
    let mut pooled = mats[0].clone();
    for m in &mats[1..] {
        pooled += m;
    }
    pooled /= mats.len() as f64;
    let common = lee_carter_on_matrix(&pooled, &years_ref, 0)?;
    // Stage 2: per-country residual Lee-Carter; a degenerate residual
    // (coherent limit) collapses to uniform b and zero k.
    let n_ages = pooled.nrows();
    let mut residual = Vec::with_capacity(mats.len());
    for m in &mats {
        let n_years = years_ref.len() as f64;
        let a_xc: Vec<f64> = (0..n_ages)
            .map(|i| m.row(i).iter().sum::<f64>() / n_years)
            .collect();
        let mut resid = m.clone();
        for i in 0..n_ages {
            for j in 0..years_ref.len() {
                resid[(i, j)] -= a_xc[i] + common.b_x[i] * common.k_common_at(j);
            }
        }
        match leading_factor(&resid) {
            Ok((b, mut k)) => {
                let k_mean = k.iter().sum::<f64>() / n_years;
                let a_xc: Vec<f64> = a_xc
                    .iter()
                    .zip(&b)
                    .map(|(&a, &bx)| a + bx * k_mean)
                    .collect();
                for v in k.iter_mut() {
                    *v -= k_mean;
                }
                residual.push((a_xc, b, k));
            }
            Err(BaselineError::Degenerate) => {
                let b = vec![1.0 / n_ages as f64; n_ages];
                let k = vec![0.0; years_ref.len()];
                residual.push((a_xc, b, k));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LiLeeFit {
        countries: panel.countries.clone(),
        gender,
        years: years_ref,
        b_common: common.b_x,
        k_common: common.kappa_t,
        residual,
        imputed_cells,
    })
}

// Tiny adaptor so stage 2 can read the common kappa by column index.
trait KCommonAt {
    fn k_common_at(&self, j: usize) -> f64;
}
impl KCommonAt for LeeCarterFit {
    fn k_common_at(&self, j: usize) -> f64 {
        self.kappa_t[j]
    }
}

impl LiLeeFit {
    pub fn log_rate(&self, country_idx: usize, age: u32, year_idx: usize) -> f64 {
        let (a, b, k) = &self.residual[country_idx];
        a[age as usize]
            + self.b_common[age as usize] * self.k_common[year_idx]
            + b[age as usize] * k[year_idx]
    }
}

/// Project the common and per-country kappas by independent random walks
/// with drift. Returns (country, age, year) -> predicted log rate.
pub fn li_lee_forecast(
    fit: &LiLeeFit,
    horizon: usize,
) -> Result<BTreeMap<(String, u32, i32), f64>, BaselineError> {
    let to_series = |k: &[f64]| -> BTreeMap<i32, f64> {
        fit.years.iter().cloned().zip(k.iter().cloned()).collect()
    };
    let k_common_fc = rwd_forecast(&rwd_fit(&to_series(&fit.k_common))?, horizon);
    let n_ages = fit.b_common.len() as u32;
    let mut out = BTreeMap::new();
    for (ci, country) in fit.countries.iter().enumerate() {
        let (a, b, k) = &fit.residual[ci];
        let k_res_fc = rwd_forecast(&rwd_fit(&to_series(k))?, horizon);
        for (&year, &kc) in &k_common_fc {
            let kr = k_res_fc[&year];
            for age in 0..n_ages {
                out.insert(
                    (country.clone(), age, year),
                    a[age as usize] + fit.b_common[age as usize] * kc + b[age as usize] * kr,
                );
            }
        }
    }
    Ok(out)
}

pub fn lee_carter_factors_csv(fit: &LeeCarterFit) -> (String, String) {
    let mut ab = String::from("age,a,b\n");
    for (i, &age) in fit.ages.iter().enumerate() {
        ab.push_str(&format!("{age},{:.17e},{:.17e}\n", fit.a_x[i], fit.b_x[i]));
    }
    let mut kappa = String::from("year,kappa\n");
    for (i, &year) in fit.years.iter().enumerate() {
        kappa.push_str(&format!("{year},{:.17e}\n", fit.kappa_t[i]));
    }
    (ab, kappa)
}
