//! Covariate forecasting by random walks with drift, and projection of
//! future age-specific death rates through a fitted model.

use crate::covariates::{CovariateSet, FrameRow, Segment};
use crate::data::{Gender, MortalityPanel};
use crate::design::DesignError;
use crate::reml::FittedModel;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series needs at least 3 consecutive years, found {found}")]
    TooShort { found: usize },
    #[error("year gap in series: {prev} is followed by {next}")]
    YearGap { prev: i32, next: i32 },
    #[error("no covariate series for {key}")]
    MissingSeries { key: String },
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Random walk with drift fitted to an annual series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RwdFit {
    /// Mean first difference, equivalently (last - first) / (T - 1).
    pub drift: f64,
    /// Sample SD of the first differences about the drift.
    pub innovation_sd: f64,
    pub last_value: f64,
    pub last_year: i32,
}

pub fn rwd_fit(series: &BTreeMap<i32, f64>) -> Result<RwdFit, ForecastError> {
    if series.len() < 3 {
        return Err(ForecastError::TooShort { found: series.len() });
    }
    let entries: Vec<(i32, f64)> = series.iter().map(|(&y, &v)| (y, v)).collect();
    for pair in entries.windows(2) {
        if pair[1].0 != pair[0].0 + 1 {
            return Err(ForecastError::YearGap {
                prev: pair[0].0,
                next: pair[1].0,
            });
        }
    }
    let diffs: Vec<f64> = entries.windows(2).map(|p| p[1].1 - p[0].1).collect();
    let m = diffs.len() as f64;
    let drift = diffs.iter().sum::<f64>() / m;
    let innovation_sd = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - drift).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let (last_year, last_value) = *entries.last().unwrap();
    Ok(RwdFit {
        drift,
        innovation_sd,
        last_value,
        last_year,
    })
}

/// Point forecasts for years last_year+1 ..= last_year+horizon.
pub fn rwd_forecast(fit: &RwdFit, horizon: usize) -> BTreeMap<i32, f64> {
    (1..=horizon as i32)
        .map(|h| (fit.last_year + h, fit.last_value + h as f64 * fit.drift))
        .collect()
}

/// Forecast every covariate series in a set: `kt` and each
/// (country, segment) `kct` series, all by their own random walk.
pub fn forecast_covariates(
    covariates: &CovariateSet,
    horizon: usize,
) -> Result<CovariateSet, ForecastError> {
    let kt_fit = rwd_fit(&covariates.kt)?;
    let mut kt = covariates.kt.clone();
    kt.extend(rwd_forecast(&kt_fit, horizon));
    let mut kct = BTreeMap::new();
    for (key, series) in &covariates.kct {
        let fit = rwd_fit(series).map_err(|e| match e {
            ForecastError::TooShort { found } => ForecastError::TooShort { found },
            other => other,
        })?;
        let mut extended = series.clone();
        extended.extend(rwd_forecast(&fit, horizon));
        kct.insert(key.clone(), extended);
    }
    Ok(CovariateSet {
        split_age: covariates.split_age,
        kt,
        kct,
    })
}

/// One forecast cell; rate = exp(log_rate). Interval bounds are on the
/// rate scale and present only when requested.
#[derive(Debug, Clone)]
pub struct ForecastRecord {
    pub country: String,
    pub gender: Gender,
    pub age: u32,
    pub year: i32,
    pub log_rate: f64,
    pub rate: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ForecastPanel {
    pub records: Vec<ForecastRecord>,
}

/// Build the full future grid (every training country, gender, and age,
/// for `horizon` years past the training range) with forecast covariates
/// attached. `y` is set to 0; it is never read by prediction.
pub fn future_frame(
    model: &FittedModel,
    countries: &[String],
    omega: u32,
    horizon: usize,
) -> Result<Vec<FrameRow>, ForecastError> {
    let extended = forecast_covariates(&model.covariates, horizon)?;
    let mut rows = Vec::with_capacity(countries.len() * 2 * (omega as usize + 1) * horizon);
    for country in countries {
        for gender in Gender::ALL {
            for age in 0..=omega {
                let seg = Segment::of_age(age, model.split_age);
                for h in 1..=horizon as i32 {
                    let year = model.train_year_max + h;
                    let kt = *extended
                        .kt
                        .get(&year)
                        .ok_or_else(|| ForecastError::MissingSeries {
                            key: format!("kt/{year}"),
                        })?;
                    let kct = *extended
                        .kct
                        .get(&(country.clone(), seg))
                        .and_then(|s| s.get(&year))
                        .ok_or_else(|| ForecastError::MissingSeries {
                            key: format!("{country}/{}/{year}", seg.as_str()),
                        })?;
                    rows.push(FrameRow {
                        country: country.clone(),
                        gender,
                        age,
                        year,
                        cohort: year - age as i32,
                        y: 0.0,
                        kt,
                        kct,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// End-to-end projection: forecast the covariates, build the future grid,
/// and push it through the model. With `interval_z` set, emits
/// `exp(log_rate ± z·sd·√h)` bounds driven by the kt innovation SD.
pub fn forecast_asdr(
    model: &FittedModel,
    panel: &MortalityPanel,
    horizon: usize,
    interval_z: Option<f64>,
) -> Result<ForecastPanel, ForecastError> {
    if horizon == 0 {
        return Ok(ForecastPanel::default());
    }
    let rows = future_frame(model, &panel.countries, panel.omega, horizon)?;
    let log_rates = model.predict(&rows)?;
    let kt_fit = rwd_fit(&model.covariates.kt)?;
    let records = rows
        .into_iter()
        .zip(log_rates)
        .map(|(row, log_rate)| {
            let (lo, hi) = match interval_z {
                Some(z) => {
                    let h = (row.year - model.train_year_max) as f64;
                    let half = z * kt_fit.innovation_sd * h.sqrt();
                    (Some((log_rate - half).exp()), Some((log_rate + half).exp()))
                }
                None => (None, None),
            };
            ForecastRecord {
                country: row.country,
                gender: row.gender,
                age: row.age,
                year: row.year,
                log_rate,
                rate: log_rate.exp(),
                lo,
                hi,
            }
        })
        .collect();
    Ok(ForecastPanel { records })
}

pub fn forecast_csv(panel: &ForecastPanel) -> String {
    let has_interval = panel.records.iter().any(|r| r.lo.is_some());
    let mut out = String::from(if has_interval {
        "country,gender,age,year,log_rate_hat,rate_hat,lo,hi\n"
    } else {
        "country,gender,age,year,log_rate_hat,rate_hat\n"
    });
    for r in &panel.records {
        out.push_str(&format!(
            "{},{},{},{},{:.17e},{:.17e}",
            r.country, r.gender, r.age, r.year, r.log_rate, r.rate
        ));
        if has_interval {
            out.push_str(&format!(
                ",{:.17e},{:.17e}",
                r.lo.unwrap_or(f64::NAN),
                r.hi.unwrap_or(f64::NAN)
            ));
        }
        out.push('\n');
    }
    out
}

/// One covariate series (history plus forecast) as CSV.
pub fn covariate_series_csv(name: &str, series: &BTreeMap<i32, f64>) -> String {
    let mut out = format!("year,{name}\n");
    for (year, value) in series {
        out.push_str(&format!("{year},{value:.17e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_panel, SynthSpec};
    use crate::design::ModelSpec;
    use crate::reml::{fit_panel, RemlOptions};
    use approx::assert_relative_eq;

    fn rank1_spec(omega: u32, n_years: usize, noise_sd: f64) -> SynthSpec {
        let n_ages = omega as usize + 1;
        let a_x: Vec<f64> = (0..n_ages).map(|x| -6.0 + 0.05 * x as f64).collect();
        let b_x: Vec<f64> = (0..n_ages).map(|x| 0.015 + 0.001 * x as f64).collect();
        // Linear k_t: its random-walk-with-drift continuation is exact.
        let k_t: Vec<f64> = (0..n_years).map(|t| -0.8 * t as f64).collect();
        SynthSpec::rank1(omega, a_x, b_x, k_t, noise_sd)
    }

    fn series(start: i32, vals: &[f64]) -> BTreeMap<i32, f64> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| (start + i as i32, v))
            .collect()
    }

    #[test]
    fn rwd_fit_matches_hand_computations() {
        let f = rwd_fit(&series(2000, &[5.0, 5.0, 5.0, 5.0])).unwrap();
        assert_eq!(f.drift, 0.0);
        assert_eq!(f.innovation_sd, 0.0);

        let f = rwd_fit(&series(2000, &[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_relative_eq!(f.drift, 1.0, epsilon = 1e-15);
        assert_relative_eq!(f.innovation_sd, 0.0, epsilon = 1e-15);

        // Differences of (0,2,1,3) are (2,-1,2): mean 1, sample SD sqrt(3).
        let f = rwd_fit(&series(2000, &[0.0, 2.0, 1.0, 3.0])).unwrap();
        assert_relative_eq!(f.drift, 1.0, epsilon = 1e-15);
        assert_relative_eq!(f.innovation_sd, 3.0f64.sqrt(), epsilon = 1e-15);
        assert_eq!(f.last_year, 2003);
        assert_eq!(f.last_value, 3.0);
    }

    #[test]
    fn rwd_fit_rejects_short_and_gapped_series() {
        assert!(matches!(
            rwd_fit(&series(2000, &[1.0, 2.0])),
            Err(ForecastError::TooShort { found: 2 })
        ));
        let mut gapped = series(2000, &[1.0, 2.0, 3.0]);
        gapped.insert(2005, 9.0);
        assert!(matches!(
            rwd_fit(&gapped),
            Err(ForecastError::YearGap { prev: 2002, next: 2005 })
        ));
    }

    #[test]
    fn rwd_forecast_is_an_arithmetic_progression() {
        let f = RwdFit {
            drift: 1.0,
            innovation_sd: 0.5,
            last_value: 3.0,
            last_year: 2010,
        };
        let fc = rwd_forecast(&f, 5);
        assert_eq!(fc[&2015], 8.0);
        assert_eq!(fc.len(), 5);
        // Composition: forecasting 2 then 3 equals forecasting 5.
        let mid = RwdFit {
            last_value: fc[&2012],
            last_year: 2012,
            ..f
        };
        let fc2 = rwd_forecast(&mid, 3);
        for (y, v) in fc2 {
            assert_relative_eq!(v, fc[&y], epsilon = 1e-15);
        }
        // Second differences of the path are 0.
        let vals: Vec<f64> = rwd_forecast(&f, 6).into_values().collect();
        for w in vals.windows(3) {
            assert_relative_eq!(w[2] - 2.0 * w[1] + w[0], 0.0, epsilon = 1e-12);
        }
    }

    fn small_fit() -> (FittedModel, MortalityPanel) {
        let spec = rank1_spec(10, 25, 0.0);
        let panel = synth_panel(&spec, 11).unwrap();
        let opts = RemlOptions::default();
        let model = fit_panel(&panel, &ModelSpec::single_population(8), 4, &opts).unwrap();
        (model, panel)
    }

    #[test]
    fn horizon_zero_is_empty_and_grid_accounting_holds() {
        let (model, panel) = small_fit();
        let empty = forecast_asdr(&model, &panel, 0, None).unwrap();
        assert!(empty.records.is_empty());
        let fc = forecast_asdr(&model, &panel, 4, None).unwrap();
        // M countries x 2 genders x (omega+1) ages x horizon years.
        assert_eq!(fc.records.len(), 1 * 2 * 11 * 4);
        for r in &fc.records {
            assert!(r.year > panel.year_max);
            assert_relative_eq!(r.rate, r.log_rate.exp(), epsilon = 1e-15);
        }
    }

    #[test]
    fn noiseless_linear_generator_is_forecast_exactly() {
        // rank1 with noise 0: y = a_x + b_x * k_t with linear k_t, so the
        // RWD continuation of kt reproduces the generator out of sample.
        let (model, panel) = small_fit();
        let spec = rank1_spec(10, 25, 0.0);
        let fc = forecast_asdr(&model, &panel, 5, None).unwrap();
        let kt_slope = spec.k_t[1] - spec.k_t[0];
        let kt_last = *spec.k_t.last().unwrap();
        for r in &fc.records {
            let h = (r.year - panel.year_max) as f64;
            let kt = kt_last + h * kt_slope;
            let truth = spec.a_x[r.age as usize] + spec.b_x[r.age as usize] * kt;
            assert_relative_eq!(r.log_rate, truth, epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    #[test]
    fn extrapolated_predictions_are_linear_in_kt() {
        let (model, panel) = small_fit();
        // Equally spaced kt grid past the training range for one cell.
        let kt_max = model.covariates.kt.values().cloned().fold(f64::MIN, f64::max);
        let seg = Segment::of_age(3, model.split_age);
        let kct = *model.covariates.kct[&(panel.countries[0].clone(), seg)]
            .values()
            .last()
            .unwrap();
        let rows: Vec<FrameRow> = (0..6)
            .map(|i| FrameRow {
                country: panel.countries[0].clone(),
                gender: Gender::Female,
                age: 3,
                year: panel.year_max + 1 + i,
                cohort: panel.year_max + 1 + i - 3,
                y: 0.0,
                kt: kt_max + 0.5 + 0.25 * i as f64,
                kct,
            })
            .collect();
        let pred = model.predict(&rows).unwrap();
        for w in pred.windows(3) {
            assert_relative_eq!(w[2] - 2.0 * w[1] + w[0], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn predictions_are_row_order_invariant() {
        let (model, _panel) = small_fit();
        let rows = future_frame(&model, &["SYN".to_string()], 10, 3).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let a = model.predict(&rows).unwrap();
        let b = model.predict(&rev).unwrap();
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn intervals_bracket_the_point_forecast_and_widen() {
        let spec = rank1_spec(10, 25, 0.01);
        let panel = synth_panel(&spec, 7).unwrap();
        let model = fit_panel(
            &panel,
            &ModelSpec::single_population(8),
            4,
            &RemlOptions::default(),
        )
        .unwrap();
        let fc = forecast_asdr(&model, &panel, 3, Some(1.96)).unwrap();
        let mut widths: BTreeMap<i32, f64> = BTreeMap::new();
        for r in &fc.records {
            let (lo, hi) = (r.lo.unwrap(), r.hi.unwrap());
            assert!(lo <= r.rate && r.rate <= hi);
            widths.insert(r.year, hi.ln() - lo.ln());
        }
        let w: Vec<f64> = widths.into_values().collect();
        assert!(w[0] <= w[1] && w[1] <= w[2]);
    }

    #[test]
    fn csv_has_interval_columns_only_when_requested() {
        let (model, panel) = small_fit();
        let plain = forecast_csv(&forecast_asdr(&model, &panel, 1, None).unwrap());
        assert!(plain.starts_with("country,gender,age,year,log_rate_hat,rate_hat\n"));
        let with = forecast_csv(&forecast_asdr(&model, &panel, 1, Some(1.0)).unwrap());
        assert!(with.starts_with("country,gender,age,year,log_rate_hat,rate_hat,lo,hi\n"));
    }
}
