//! Train/test splitting, MSE computation, and model-comparison reports.

use crate::data::{Gender, MortalityPanel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cutoff {cutoff} leaves an empty {side} set (panel years {min}..={max})")]
    EmptySide {
        cutoff: i32,
        side: &'static str,
        min: i32,
        max: i32,
    },
    #[error("prediction missing for {key}")]
    Misaligned { key: String },
    #[error("no overlapping cells between actuals and predictions")]
    NoOverlap,
    #[error("population {country}/{gender} present for {present} but not {missing}")]
    JoinMismatch {
        country: String,
        gender: Gender,
        present: String,
        missing: String,
    },
}

/// Partition a panel by year: train <= cutoff < test.
pub fn split(
    panel: &MortalityPanel,
    cutoff: i32,
) -> Result<(MortalityPanel, MortalityPanel), EvalError> {
    let err = |side| EvalError::EmptySide {
        cutoff,
        side,
        min: panel.year_min,
        max: panel.year_max,
    };
    if cutoff < panel.year_min {
        return Err(err("train"));
    }
    if cutoff >= panel.year_max {
        return Err(err("test"));
    }
    let mut train = panel.clone();
    let mut test = panel.clone();
    train.records.retain(|r| r.year <= cutoff);
    test.records.retain(|r| r.year > cutoff);
    train.year_max = cutoff;
    test.year_min = cutoff + 1;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Rate,
    Log,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Rate => "rate",
            Scale::Log => "log",
        }
    }
}

/// MSE between held-out log rates and predicted log rates, on the
/// requested scale. `predicted` is looked up by (age, year); cells absent
/// from the predictions are an error, cells absent from the actuals are
/// skipped (they were excluded at ingest).
pub fn mse_over_cells(
    actual: &[(u32, i32, f64)],
    predicted: &impl Fn(u32, i32) -> Option<f64>,
    scale: Scale,
) -> Result<f64, EvalError> {
    if actual.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let mut sum = 0.0;
    for &(age, year, log_actual) in actual {
        let log_pred = predicted(age, year).ok_or_else(|| EvalError::Misaligned {
            key: format!("age {age}, year {year}"),
        })?;
        let d = match scale {
            Scale::Log => log_actual - log_pred,
            Scale::Rate => log_actual.exp() - log_pred.exp(),
        };
        sum += d * d;
    }
    Ok(sum / actual.len() as f64)
}

/// Plain paired MSE for pre-aligned vectors.
pub fn mse(actual: &[f64], predicted: &[f64], scale: Scale) -> Result<f64, EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::Misaligned {
            key: format!("lengths {} vs {}", actual.len(), predicted.len()),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(&a, &p)| {
            let d = match scale {
                Scale::Log => a - p,
                Scale::Rate => a.exp() - p.exp(),
            };
            d * d
        })
        .sum();
    Ok(sum / actual.len() as f64)
}

/// One model's MSE for one population on one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub country: String,
    pub gender: Gender,
    pub model: String,
    pub scale: Scale,
    pub train_mse: Option<f64>,
    pub test_mse: f64,
}

/// Ratio of a baseline's test MSE to the reference model's, per population.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub country: String,
    pub gender: Gender,
    pub baseline: String,
    pub scale: Scale,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<MseRow>,
    pub ratios: Vec<RatioRow>,
}

/// Join per-model MSE rows and add baseline/reference test-MSE ratios.
/// `reference` is the model name the ratios are computed against.
pub fn compare(rows: Vec<MseRow>, reference: &str) -> Result<EvalReport, EvalError> {
    let mut ratios = Vec::new();
    for row in &rows {
        if row.model == reference {
            continue;
        }
        let ref_row = rows
            .iter()
            .find(|r| {
                r.model == reference
                    && r.country == row.country
                    && r.gender == row.gender
                    && r.scale == row.scale
            })
            .ok_or_else(|| EvalError::JoinMismatch {
                country: row.country.clone(),
                gender: row.gender,
                present: row.model.clone(),
                missing: reference.to_string(),
            })?;
        ratios.push(RatioRow {
            country: row.country.clone(),
            gender: row.gender,
            baseline: row.model.clone(),
            scale: row.scale,
            ratio: row.test_mse / ref_row.test_mse,
        });
    }
    Ok(EvalReport { rows, ratios })
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("country,gender,model,scale,train_mse,test_mse\n");
    for r in &report.rows {
        let train = r
            .train_mse
            .map(|v| format!("{v:.17e}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.17e}\n",
            r.country,
            r.gender,
            r.model,
            r.scale.as_str(),
            train,
            r.test_mse
        ));
    }
    out.push_str("\ncountry,gender,baseline,scale,ratio\n");
    for r in &report.ratios {
        out.push_str(&format!(
            "{},{},{},{},{:.17e}\n",
            r.country,
            r.gender,
            r.baseline,
            r.scale.as_str(),
            r.ratio
        ));
    }
    out
}

/// Aligned text table on one scale: one column per population, one row
/// per model, plus a ratio row per baseline.
pub fn report_table(report: &EvalReport, scale: Scale) -> String {
    let mut pops: Vec<(String, Gender)> = report
        .rows
        .iter()
        .filter(|r| r.scale == scale)
        .map(|r| (r.country.clone(), r.gender))
        .collect();
    pops.sort();
    pops.dedup();
    let mut models: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.scale == scale)
        .map(|r| r.model.clone())
        .collect();
    models.sort();
    models.dedup();
    let label_w = models
        .iter()
        .map(|m| m.len() + " test set".len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap_or(8)
        + 2;
    let col_w = 14usize;
    let mut out = format!("test-set MSE, {} scale\n", scale.as_str());
    out.push_str(&format!("{:<label_w$}", "model"));
    for (c, g) in &pops {
        out.push_str(&format!("{:>col_w$}", format!("{c}-{g}")));
    }
    out.push('\n');
    for m in &models {
        out.push_str(&format!("{:<label_w$}", format!("{m} test set")));
        for (c, g) in &pops {
            let cell = report
                .rows
                .iter()
                .find(|r| {
                    r.scale == scale && r.model == *m && r.country == *c && r.gender == *g
                })
                .map(|r| format!("{:.3e}", r.test_mse))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{cell:>col_w$}"));
        }
        out.push('\n');
    }
    let mut baselines: Vec<String> = report
        .ratios
        .iter()
        .filter(|r| r.scale == scale)
        .map(|r| r.baseline.clone())
        .collect();
    baselines.sort();
    baselines.dedup();
    for b in &baselines {
        out.push_str(&format!("{:<label_w$}", format!("{b}/ref ratio")));
        for (c, g) in &pops {
            let cell = report
                .ratios
                .iter()
                .find(|r| {
                    r.scale == scale && r.baseline == *b && r.country == *c && r.gender == *g
                })
                .map(|r| format!("{:.3}", r.ratio))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{cell:>col_w$}"));
        }
        out.push('\n');
    }
    out
}
