//! Mortality covariates `k_t` and `k_ct`.
//!
//! `k_t` is the mean log ASDR over all countries, genders, and ages at year
//! `t`. `k_ct` is the per-country mean over a low-age segment (ages
//! `0..=split_age`) or a high-age segment (`split_age+1..=omega`). Means are
//! taken over cells present in the panel; excluded zero-rate cells shrink
//! the denominator.

use crate::data::{Gender, MortalityPanel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_SPLIT_AGE: u32 = 40;

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error("panel is empty")]
    EmptyPanel,
    #[error("split_age {split_age} not inside (0, {omega})")]
    BadSplitAge { split_age: u32, omega: u32 },
    #[error("no records for country {country}, segment {segment:?}, year {year}")]
    MissingSegment {
        country: String,
        segment: Segment,
        year: i32,
    },
    #[error("covariates do not cover {what} `{key}`")]
    Uncovered { what: &'static str, key: String },
}

/// Age segment of the `k_ct` covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    Low,
    High,
}

impl Segment {
    pub fn of_age(age: u32, split_age: u32) -> Segment {
        if age <= split_age {
            Segment::Low
        } else {
            Segment::High
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Segment::Low => "low",
            Segment::High => "high",
        }
    }
}

/// The covariate series computed from a training panel.
///
/// Serialized through a tuple-list mirror because JSON objects cannot have
/// integer or composite keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "CovariateSetWire", into = "CovariateSetWire")]
pub struct CovariateSet {
    pub split_age: u32,
    pub kt: BTreeMap<i32, f64>,
    pub kct: BTreeMap<(String, Segment), BTreeMap<i32, f64>>,
}

#[derive(Serialize, Deserialize)]
struct CovariateSetWire {
    split_age: u32,
    kt: Vec<(i32, f64)>,
    kct: Vec<(String, Segment, Vec<(i32, f64)>)>,
}

impl From<CovariateSet> for CovariateSetWire {
    fn from(c: CovariateSet) -> Self {
        CovariateSetWire {
            split_age: c.split_age,
            kt: c.kt.into_iter().collect(),
            kct: c
                .kct
                .into_iter()
                .map(|((country, seg), series)| (country, seg, series.into_iter().collect()))
                .collect(),
        }
    }
}

impl From<CovariateSetWire> for CovariateSet {
    fn from(w: CovariateSetWire) -> Self {
        CovariateSet {
            split_age: w.split_age,
            kt: w.kt.into_iter().collect(),
            kct: w
                .kct
                .into_iter()
                .map(|(country, seg, series)| ((country, seg), series.into_iter().collect()))
                .collect(),
        }
    }
}

/// Mean of log rates over everything present at each year.
pub fn compute_kt(panel: &MortalityPanel) -> Result<BTreeMap<i32, f64>, CovariateError> {
    if panel.records.is_empty() {
        return Err(CovariateError::EmptyPanel);
    }
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for r in &panel.records {
        let e = sums.entry(r.year).or_insert((0.0, 0));
        e.0 += r.log_rate;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(year, (sum, n))| (year, sum / n as f64))
        .collect())
}

/// Per-country segment means of log rates at each year.
pub fn compute_kct(
    panel: &MortalityPanel,
    split_age: u32,
) -> Result<BTreeMap<(String, Segment), BTreeMap<i32, f64>>, CovariateError> {
    if panel.records.is_empty() {
        return Err(CovariateError::EmptyPanel);
    }
    if split_age == 0 || split_age >= panel.omega {
        return Err(CovariateError::BadSplitAge {
            split_age,
            omega: panel.omega,
        });
    }
    let mut sums: BTreeMap<(String, Segment, i32), (f64, usize)> = BTreeMap::new();
    for r in &panel.records {
        let seg = Segment::of_age(r.age, split_age);
        let e = sums
            .entry((r.country.clone(), seg, r.year))
            .or_insert((0.0, 0));
        e.0 += r.log_rate;
        e.1 += 1;
    }
    let mut out: BTreeMap<(String, Segment), BTreeMap<i32, f64>> = BTreeMap::new();
    for ((country, seg, year), (sum, n)) in sums {
        out.entry((country, seg))
            .or_default()
            .insert(year, sum / n as f64);
    }
    // Every (country, segment) must cover every panel year.
    for country in &panel.countries {
        for seg in [Segment::Low, Segment::High] {
            let series = out.get(&(country.clone(), seg));
            for year in panel.year_min..=panel.year_max {
                if series.map_or(true, |s| !s.contains_key(&year)) {
                    return Err(CovariateError::MissingSegment {
                        country: country.clone(),
                        segment: seg,
                        year,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Compute both covariates at once.
pub fn compute_covariates(
    panel: &MortalityPanel,
    split_age: u32,
) -> Result<CovariateSet, CovariateError> {
    Ok(CovariateSet {
        split_age,
        kt: compute_kt(panel)?,
        kct: compute_kct(panel, split_age)?,
    })
}

/// One panel record joined with its covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub country: String,
    pub gender: Gender,
    pub age: u32,
    pub year: i32,
    pub cohort: i32,
    pub y: f64,
    pub kt: f64,
    pub kct: f64,
}

/// Panel records with covariates attached; the modelling input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFrame {
    pub rows: Vec<FrameRow>,
    pub countries: Vec<String>,
    pub omega: u32,
    pub split_age: u32,
    pub year_min: i32,
    pub year_max: i32,
}

impl ModelFrame {
    pub fn n(&self) -> usize {
        self.rows.len()
    }
}

/// Join each record with its `k_t` and segment-resolved `k_ct`.
pub fn attach_covariates(
    panel: &MortalityPanel,
    covariates: &CovariateSet,
) -> Result<ModelFrame, CovariateError> {
    let mut rows = Vec::with_capacity(panel.records.len());
    for r in &panel.records {
        let kt = *covariates
            .kt
            .get(&r.year)
            .ok_or_else(|| CovariateError::Uncovered {
                what: "year",
                key: r.year.to_string(),
            })?;
        let seg = Segment::of_age(r.age, covariates.split_age);
        let kct = *covariates
            .kct
            .get(&(r.country.clone(), seg))
            .and_then(|s| s.get(&r.year))
            .ok_or_else(|| CovariateError::Uncovered {
                what: "country/segment/year",
                key: format!("{}/{}/{}", r.country, seg.as_str(), r.year),
            })?;
        rows.push(FrameRow {
            country: r.country.clone(),
            gender: r.gender,
            age: r.age,
            year: r.year,
            cohort: r.cohort,
            y: r.log_rate,
            kt,
            kct,
        });
    }
    Ok(ModelFrame {
        rows,
        countries: panel.countries.clone(),
        omega: panel.omega,
        split_age: covariates.split_age,
        year_min: panel.year_min,
        year_max: panel.year_max,
    })
}

/// CSV export: `year,kt`.
pub fn kt_csv(covariates: &CovariateSet) -> String {
    let mut out = String::from("year,kt\n");
    for (year, v) in &covariates.kt {
        out.push_str(&format!("{year},{v:.17e}\n"));
    }
    out
}

/// CSV export: `country,segment,year,kct`.
pub fn kct_csv(covariates: &CovariateSet) -> String {
    let mut out = String::from("country,segment,year,kct\n");
    for ((country, seg), series) in &covariates.kct {
        for (year, v) in series {
            out.push_str(&format!("{country},{},{year},{v:.17e}\n", seg.as_str()));
        }
    }
    out
}
