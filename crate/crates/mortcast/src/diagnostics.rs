//! Residual diagnostics: autocorrelation, normal Q-Q points, and
//! residual-versus-fitted summaries, with CSV emitters for plotting.

use crate::covariates::FrameRow;
use crate::data::Gender;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {needed} observations, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("series for {key} is constant; autocorrelation undefined")]
    ConstantSeries { key: String },
    #[error("residual and row counts differ: {rows} rows, {resids} residuals")]
    LengthMismatch { rows: usize, resids: usize },
}

/// Sample autocorrelation of one series up to `max_lag`, with the usual
/// biased (1/n) normalization so `acf[0] = 1`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let n = series.len();
    if n < max_lag + 2 {
        return Err(DiagnosticsError::TooShort {
            needed: max_lag + 2,
            found: n,
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(DiagnosticsError::ConstantSeries {
            key: "series".into(),
        });
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let ck: f64 = (0..n - lag)
            .map(|i| (series[i] - mean) * (series[i + lag] - mean))
            .sum::<f64>()
            / n as f64;
        out.push(ck / c0);
    }
    Ok(out)
}

/// Residual autocorrelation averaged over per-cell time series: residuals
/// are grouped by (country, gender, age), ordered by year within each
/// group, and the per-series ACFs are averaged. Constant series are an
/// error; series too short for the requested lag are skipped.
pub fn residual_acf(
    rows: &[FrameRow],
    residuals: &[f64],
    max_lag: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    if rows.len() != residuals.len() {
        return Err(DiagnosticsError::LengthMismatch {
            rows: rows.len(),
            resids: residuals.len(),
        });
    }
    let mut groups: BTreeMap<(String, Gender, u32), Vec<(i32, f64)>> = BTreeMap::new();
    for (row, &r) in rows.iter().zip(residuals) {
        groups
            .entry((row.country.clone(), row.gender, row.age))
            .or_default()
            .push((row.year, r));
    }
    let mut acc = vec![0.0; max_lag + 1];
    let mut count = 0usize;
    for ((country, gender, age), mut series) in groups {
        series.sort_by_key(|&(year, _)| year);
        let vals: Vec<f64> = series.into_iter().map(|(_, v)| v).collect();
        if vals.len() < max_lag + 2 {
            continue;
        }
        let a = acf(&vals, max_lag).map_err(|e| match e {
            DiagnosticsError::ConstantSeries { .. } => DiagnosticsError::ConstantSeries {
                key: format!("{country}:{gender}:{age}"),
            },
            other => other,
        })?;
        for (s, v) in acc.iter_mut().zip(&a) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(DiagnosticsError::TooShort {
            needed: max_lag + 2,
            found: 0,
        });
    }
    for s in acc.iter_mut() {
        *s /= count as f64;
    }
    Ok(acc)
}

/// Normal Q-Q points: residuals are standardized by their (population)
/// mean and SD, sorted, and paired with `Phi^{-1}((i - 0.5) / n)`.
pub fn qq_points(residuals: &[f64]) -> Result<Vec<(f64, f64)>, DiagnosticsError> {
    let n = residuals.len();
    if n < 2 {
        return Err(DiagnosticsError::TooShort { needed: 2, found: n });
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let var = residuals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(DiagnosticsError::ConstantSeries {
            key: "residuals".into(),
        });
    }
    let sd = var.sqrt();
    let mut std: Vec<f64> = residuals.iter().map(|v| (v - mean) / sd).collect();
    std.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std
        .into_iter()
        .enumerate()
        .map(|(i, s)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), s))
        .collect())
}

/// (fitted, residual) pairs plus residual SD per fitted-value decile, for
/// heteroskedasticity checks.
pub struct ResidualsVsFitted {
    pub points: Vec<(f64, f64)>,
    /// (decile midpoint of fitted values, residual SD in that decile).
    pub decile_sd: Vec<(f64, f64)>,
}

pub fn residuals_vs_fitted(
    fitted: &[f64],
    residuals: &[f64],
) -> Result<ResidualsVsFitted, DiagnosticsError> {
    if fitted.len() != residuals.len() {
        return Err(DiagnosticsError::LengthMismatch {
            rows: fitted.len(),
            resids: residuals.len(),
        });
    }
    if fitted.len() < 10 {
        return Err(DiagnosticsError::TooShort {
            needed: 10,
            found: fitted.len(),
        });
    }
    let mut points: Vec<(f64, f64)> = fitted.iter().cloned().zip(residuals.iter().cloned()).collect();
    let mut sorted = points.clone();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = sorted.len();
    let mut decile_sd = Vec::with_capacity(10);
    for d in 0..10 {
        let lo = d * n / 10;
        let hi = ((d + 1) * n / 10).max(lo + 1).min(n);
        let chunk = &sorted[lo..hi];
        let m = chunk.len() as f64;
        let mean_f = chunk.iter().map(|p| p.0).sum::<f64>() / m;
        let mean_r = chunk.iter().map(|p| p.1).sum::<f64>() / m;
        let sd = (chunk.iter().map(|p| (p.1 - mean_r).powi(2)).sum::<f64>() / m).sqrt();
        decile_sd.push((mean_f, sd));
    }
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(ResidualsVsFitted { points, decile_sd })
}

pub fn acf_csv(acf: &[f64]) -> String {
    let mut out = String::from("lag,acf\n");
    for (lag, v) in acf.iter().enumerate() {
        out.push_str(&format!("{lag},{v:.17e}\n"));
    }
    out
}

pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("theoretical,sample\n");
    for (t, s) in points {
        out.push_str(&format!("{t:.17e},{s:.17e}\n"));
    }
    out
}

pub fn residuals_vs_fitted_csv(rvf: &ResidualsVsFitted) -> String {
    let mut out = String::from("fitted,residual\n");
    for (f, r) in &rvf.points {
        out.push_str(&format!("{f:.17e},{r:.17e}\n"));
    }
    out
}

pub fn decile_sd_csv(rvf: &ResidualsVsFitted) -> String {
    let mut out = String::from("fitted_mid,resid_sd\n");
    for (f, s) in &rvf.decile_sd {
        out.push_str(&format!("{f:.17e},{s:.17e}\n"));
    }
    out
}
