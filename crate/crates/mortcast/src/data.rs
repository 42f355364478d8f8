//! HMD-style data ingestion and panel assembly.
//!
//! Parses `Mx_1x1` death-rate files, builds the long-format mortality panel
//! used by the rest of the pipeline, and generates synthetic panels for
//! testing and calibration runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeInclusive;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed token `{token}`")]
    MalformedToken { line: usize, token: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    BadColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing `Year Age Female Male Total` header line")]
    MissingHeader,
    #[error("duplicate (year, age) key ({year}, {age})")]
    DuplicateKey { year: i32, age: u32 },
    #[error("age {age} outside 0..=110")]
    AgeOutOfRange { age: u32 },
    #[error("negative rate {rate} at ({year}, {age})")]
    NegativeRate { year: i32, age: u32, rate: f64 },
    #[error("panel is empty after applying year/age ranges")]
    EmptyPanel,
    #[error("synthetic spec: {0}")]
    BadSynthSpec(String),
    #[error("panel csv: {0}")]
    BadPanelCsv(String),
}

/// Gender of a population subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s {
            "female" | "f" | "F" => Some(Gender::Female),
            "male" | "m" | "M" => Some(Gender::Male),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed `Mx_1x1` line: death rates per gender for a (year, age) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MxRow {
    pub year: i32,
    pub age: u32,
    pub female: Option<f64>,
    pub male: Option<f64>,
}

/// Per-country death-rate table in HMD layout.
#[derive(Debug, Clone)]
pub struct MortalityTable {
    pub country: String,
    pub rows: Vec<MxRow>,
}

/// Parse an HMD `Mx_1x1` text stream.
///
/// Lines before the `Year Age Female Male Total` header are treated as
/// preamble. The age token `110+` maps to 110 and a `.` rate to missing.
pub fn parse_hmd_mx(country: &str, text: &str) -> Result<MortalityTable, DataError> {
    let mut rows: Vec<MxRow> = Vec::new();
    let mut seen: BTreeSet<(i32, u32)> = BTreeSet::new();
    let mut in_body = false;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if !in_body {
            if tokens.len() >= 5
                && tokens[0].eq_ignore_ascii_case("year")
                && tokens[1].eq_ignore_ascii_case("age")
            {
                in_body = true;
            }
            continue;
        }
        if tokens.len() != 5 {
            return Err(DataError::BadColumnCount {
                line: lineno,
                expected: 5,
                found: tokens.len(),
            });
        }
        let year: i32 = tokens[0].parse().map_err(|_| DataError::MalformedToken {
            line: lineno,
            token: tokens[0].to_string(),
        })?;
        let age = parse_age(tokens[1], lineno)?;
        if age > 110 {
            return Err(DataError::AgeOutOfRange { age });
        }
        let female = parse_rate(tokens[2], lineno)?;
        let male = parse_rate(tokens[3], lineno)?;
        // Total column is parsed for validation only.
        parse_rate(tokens[4], lineno)?;
        for rate in [female, male].into_iter().flatten() {
            if rate < 0.0 {
                return Err(DataError::NegativeRate { year, age, rate });
            }
        }
        if !seen.insert((year, age)) {
            return Err(DataError::DuplicateKey { year, age });
        }
        rows.push(MxRow {
            year,
            age,
            female,
            male,
        });
    }

    if !in_body {
        return Err(DataError::MissingHeader);
    }
    Ok(MortalityTable {
        country: country.to_string(),
        rows,
    })
}

fn parse_age(token: &str, line: usize) -> Result<u32, DataError> {
    let stripped = token.strip_suffix('+').unwrap_or(token);
    stripped.parse().map_err(|_| DataError::MalformedToken {
        line,
        token: token.to_string(),
    })
}

fn parse_rate(token: &str, line: usize) -> Result<Option<f64>, DataError> {
    if token == "." {
        return Ok(None);
    }
    token
        .parse::<f64>()
        .map(Some)
        .map_err(|_| DataError::MalformedToken {
            line,
            token: token.to_string(),
        })
}

/// One long-format panel observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub country: String,
    pub gender: Gender,
    pub age: u32,
    pub year: i32,
    pub rate: f64,
    pub log_rate: f64,
    pub cohort: i32,
}

/// Long-format mortality panel over countries, genders, ages, and years.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MortalityPanel {
    pub records: Vec<PanelRecord>,
    pub countries: Vec<String>,
    pub omega: u32,
    pub year_min: i32,
    pub year_max: i32,
    /// Cells dropped because the rate was missing or zero.
    pub excluded_cells: usize,
}

impl MortalityPanel {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn years(&self) -> RangeInclusive<i32> {
        self.year_min..=self.year_max
    }

    /// Canonical CSV: `country,gender,age,year,rate,log_rate,cohort`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("country,gender,age,year,rate,log_rate,cohort\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{}\n",
                r.country, r.gender, r.age, r.year, r.rate, r.log_rate, r.cohort
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MortalityPanel, DataError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| {
            DataError::BadPanelCsv("empty file".into())
        })?;
        if header.trim() != "country,gender,age,year,rate,log_rate,cohort" {
            return Err(DataError::BadPanelCsv(format!(
                "unexpected header `{header}`"
            )));
        }
        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(DataError::BadPanelCsv(format!(
                    "line {}: expected 7 fields",
                    idx + 2
                )));
            }
            let bad = |f: &str| DataError::BadPanelCsv(format!("line {}: `{}`", idx + 2, f));
            records.push(PanelRecord {
                country: fields[0].to_string(),
                gender: Gender::parse(fields[1]).ok_or_else(|| bad(fields[1]))?,
                age: fields[2].parse().map_err(|_| bad(fields[2]))?,
                year: fields[3].parse().map_err(|_| bad(fields[3]))?,
                rate: fields[4].parse().map_err(|_| bad(fields[4]))?,
                log_rate: fields[5].parse().map_err(|_| bad(fields[5]))?,
                cohort: fields[6].parse().map_err(|_| bad(fields[6]))?,
            });
        }
        panel_from_records(records)
    }
}

fn panel_from_records(records: Vec<PanelRecord>) -> Result<MortalityPanel, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyPanel);
    }
    let mut countries: Vec<String> = records.iter().map(|r| r.country.clone()).collect();
    countries.sort();
    countries.dedup();
    let omega = records.iter().map(|r| r.age).max().unwrap();
    let year_min = records.iter().map(|r| r.year).min().unwrap();
    let year_max = records.iter().map(|r| r.year).max().unwrap();
    Ok(MortalityPanel {
        records,
        countries,
        omega,
        year_min,
        year_max,
        excluded_cells: 0,
    })
}

/// Assemble the long-format panel from per-country tables.
///
/// Cells with missing or zero rates are excluded (the log is undefined) and
/// counted in `excluded_cells`.
pub fn build_panel(
    tables: &[MortalityTable],
    years: RangeInclusive<i32>,
    ages: RangeInclusive<u32>,
) -> Result<MortalityPanel, DataError> {
    let mut records = Vec::new();
    let mut excluded = 0usize;
    for table in tables {
        for row in &table.rows {
            if !years.contains(&row.year) || !ages.contains(&row.age) {
                continue;
            }
            for (gender, rate) in [(Gender::Female, row.female), (Gender::Male, row.male)] {
                match rate {
                    Some(r) if r > 0.0 => records.push(PanelRecord {
                        country: table.country.clone(),
                        gender,
                        age: row.age,
                        year: row.year,
                        rate: r,
                        log_rate: r.ln(),
                        cohort: row.year - row.age as i32,
                    }),
                    _ => excluded += 1,
                }
            }
        }
    }
    records.sort_by(|a, b| {
        (&a.country, a.gender, a.age, a.year).cmp(&(&b.country, b.gender, b.age, b.year))
    });
    let mut panel = panel_from_records(records)?;
    panel.excluded_cells = excluded;
    Ok(panel)
}

/// Generator for synthetic panels: `log_rate = a_x + b_x k_t + extras + noise`.
///
/// The optional fields add structure beyond the rank-1 core so the generated
/// surfaces resemble real multi-population mortality data; they all default
/// to zero / empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub countries: Vec<String>,
    pub year_start: i32,
    pub omega: u32,
    pub a_x: Vec<f64>,
    pub b_x: Vec<f64>,
    pub k_t: Vec<f64>,
    pub noise_sd: f64,
    /// Quadratic response `c_x * k_t^2` per age (empty = zeros).
    #[serde(default)]
    pub curvature: Vec<f64>,
    /// Additive offset for male records.
    #[serde(default)]
    pub gender_gap: f64,
    /// Additive per-country offsets (empty = zeros).
    #[serde(default)]
    pub country_offsets: Vec<f64>,
    /// Amplitude of a smooth cohort effect.
    #[serde(default)]
    pub cohort_amp: f64,
    /// Per-age noise SD overriding `noise_sd` (empty = constant noise).
    #[serde(default)]
    pub noise_sd_by_age: Vec<f64>,
    /// Per-(country, gender) multiplier on b_x, row-major over
    /// countries x [female, male] (empty = all ones).
    #[serde(default)]
    pub b_scale: Vec<f64>,
    /// Per-country segment deviations `[slope_low, wiggle_low, slope_high,
    /// wiggle_high]`: each age segment drifts away from the common trend on
    /// its own near-linear path (empty = none). Within a population the two
    /// paths are linearly independent, so the deviation surface has rank 2.
    #[serde(default)]
    pub seg_dev: Vec<[f64; 4]>,
    /// Last age of the low segment for `seg_dev`.
    #[serde(default)]
    pub seg_split_age: u32,
}

impl SynthSpec {
    /// Minimal rank-1 generator over one country.
    pub fn rank1(omega: u32, a_x: Vec<f64>, b_x: Vec<f64>, k_t: Vec<f64>, noise_sd: f64) -> Self {
        SynthSpec {
            countries: vec!["SYN".to_string()],
            year_start: 2000,
            omega,
            a_x,
            b_x,
            k_t,
            noise_sd,
            curvature: Vec::new(),
            gender_gap: 0.0,
            country_offsets: Vec::new(),
            cohort_amp: 0.0,
            noise_sd_by_age: Vec::new(),
            b_scale: Vec::new(),
            seg_dev: Vec::new(),
            seg_split_age: 0,
        }
    }

    /// Generator calibrated to resemble HMD panels: infant-mortality hump,
    /// Gompertz old-age slope, a declining period index, age-varying
    /// improvement rates with curvature, gender and country gaps, a cohort
    /// effect, and heteroskedastic noise that is largest at young ages.
    pub fn hmd_like(countries: &[&str], year_start: i32, n_years: usize, omega: u32) -> Self {
        let n_ages = omega as usize + 1;
        let mut a_x = Vec::with_capacity(n_ages);
        let mut b_x = Vec::with_capacity(n_ages);
        let mut curvature = Vec::with_capacity(n_ages);
        let mut noise_sd_by_age = Vec::with_capacity(n_ages);
        for age in 0..n_ages {
            let x = age as f64;
            // Infant hump + accident plateau + Gompertz rise.
            let infant = 2.2 * (-x / 1.5).exp();
            let accident = 0.45 * (-((x - 20.0) / 9.0).powi(2)).exp();
            let gompertz = -9.4 + 0.090 * x;
            a_x.push(gompertz + infant + accident);
            // Improvement loads most on childhood, least on the very old.
            b_x.push(0.020 - 0.000115 * x + 0.012 * (-x / 12.0).exp());
            curvature.push(2.0e-4 * (-((x - 30.0) / 25.0).powi(2)).exp());
            // Young ages are noisiest (few deaths); the oldest ages are
            // noisy again (few survivors).
            noise_sd_by_age.push(
                0.045
                    + 0.085 * (-x / 9.0).exp()
                    + 0.020 * (-((x - 25.0) / 12.0).powi(2)).exp()
                    + 0.060 * ((x - omega as f64) / 12.0).exp(),
            );
        }
        // Declining period index with a mild slowdown.
        let k_t: Vec<f64> = (0..n_years)
            .map(|t| {
                let t = t as f64;
                -1.6 * t + 0.004 * t * t + 1.8 * (t / 11.0).sin()
            })
            .collect();
        let country_offsets: Vec<f64> = (0..countries.len())
            .map(|i| 0.14 * i as f64)
            .collect();
        let mut b_scale = Vec::with_capacity(countries.len() * 2);
        for c in 0..countries.len() {
            // Gender- and country-specific improvement speeds.
            b_scale.push(1.0 + 0.11 * c as f64);
            b_scale.push(0.86 + 0.05 * c as f64);
        }
        SynthSpec {
            countries: countries.iter().map(|s| s.to_string()).collect(),
            year_start,
            omega,
            a_x,
            b_x,
            k_t,
            noise_sd: 0.0,
            curvature,
            gender_gap: 0.45,
            country_offsets,
            cohort_amp: 0.12,
            noise_sd_by_age,
            b_scale,
            seg_dev: (0..countries.len())
                .map(|c| {
                    let s = if c % 2 == 0 { 1.0 } else { -1.0 };
                    [-0.004 * s, 0.030, 0.003 * s, 0.022]
                })
                .collect(),
            seg_split_age: 40,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let n_ages = self.omega as usize + 1;
        if self.a_x.len() != n_ages || self.b_x.len() != n_ages {
            return Err(DataError::BadSynthSpec(format!(
                "a_x/b_x must have {} entries",
                n_ages
            )));
        }
        if self.k_t.is_empty() {
            return Err(DataError::BadSynthSpec("k_t is empty".into()));
        }
        if self.countries.is_empty() {
            return Err(DataError::BadSynthSpec("no countries".into()));
        }
        for (name, v) in [
            ("curvature", &self.curvature),
            ("noise_sd_by_age", &self.noise_sd_by_age),
        ] {
            if !v.is_empty() && v.len() != n_ages {
                return Err(DataError::BadSynthSpec(format!(
                    "{name} must be empty or have {n_ages} entries"
                )));
            }
        }
        if !self.country_offsets.is_empty() && self.country_offsets.len() != self.countries.len() {
            return Err(DataError::BadSynthSpec(
                "country_offsets length mismatch".into(),
            ));
        }
        if !self.b_scale.is_empty() && self.b_scale.len() != 2 * self.countries.len() {
            return Err(DataError::BadSynthSpec("b_scale length mismatch".into()));
        }
        if !self.seg_dev.is_empty() && self.seg_dev.len() != self.countries.len() {
            return Err(DataError::BadSynthSpec("seg_dev length mismatch".into()));
        }
        Ok(())
    }

    /// The noiseless mean log rate for one cell.
    pub fn mean_log_rate(&self, country_idx: usize, gender: Gender, age: u32, t: usize) -> f64 {
        let x = age as usize;
        let kt = self.k_t[t];
        let gi = match gender {
            Gender::Female => 0,
            Gender::Male => 1,
        };
        let bscale = if self.b_scale.is_empty() {
            1.0
        } else {
            self.b_scale[2 * country_idx + gi]
        };
        let mut y = self.a_x[x] + bscale * self.b_x[x] * kt;
        if !self.curvature.is_empty() {
            y += self.curvature[x] * kt * kt;
        }
        if gender == Gender::Male {
            y += self.gender_gap;
        }
        if !self.country_offsets.is_empty() {
            y += self.country_offsets[country_idx];
        }
        if self.cohort_amp != 0.0 {
            let cohort = (self.year_start + t as i32 - age as i32) as f64;
            y += self.cohort_amp * (cohort / 17.0).sin();
        }
        if !self.seg_dev.is_empty() {
            let [s_lo, w_lo, s_hi, w_hi] = self.seg_dev[country_idx];
            let td = t as f64 - (self.k_t.len() as f64 - 1.0) / 2.0;
            y += if age <= self.seg_split_age {
                s_lo * td + w_lo * (td / 6.0).sin()
            } else {
                s_hi * td + w_hi * (td / 7.5).sin()
            };
        }
        y
    }
}

/// Generate a synthetic panel; deterministic for a fixed seed.
pub fn synth_panel(spec: &SynthSpec, seed: u64) -> Result<MortalityPanel, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (ci, country) in spec.countries.iter().enumerate() {
        for gender in Gender::ALL {
            for age in 0..=spec.omega {
                for (t, _) in spec.k_t.iter().enumerate() {
                    let year = spec.year_start + t as i32;
                    let sd = if spec.noise_sd_by_age.is_empty() {
                        spec.noise_sd
                    } else {
                        spec.noise_sd_by_age[age as usize]
                    };
                    let noise = if sd > 0.0 { gauss(&mut rng) * sd } else { 0.0 };
                    let log_rate = spec.mean_log_rate(ci, gender, age, t) + noise;
                    records.push(PanelRecord {
                        country: country.clone(),
                        gender,
                        age,
                        year,
                        rate: log_rate.exp(),
                        log_rate,
                        cohort: year - age as i32,
                    });
                }
            }
        }
    }
    panel_from_records(records)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render one country's slice of a panel as an HMD-style `Mx_1x1` file.
///
/// The Total column is the plain mean of the gender rates; missing cells
/// are written as `.`.
pub fn to_hmd_mx_text(panel: &MortalityPanel, country: &str) -> String {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(i32, u32), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in panel.records.iter().filter(|r| r.country == country) {
        let e = cells.entry((r.year, r.age)).or_insert((None, None));
        match r.gender {
            Gender::Female => e.0 = Some(r.rate),
            Gender::Male => e.1 = Some(r.rate),
        }
    }
    let mut out = format!("{country}, Death rates (period 1x1)\n\n");
    out.push_str("  Year          Age             Female            Male           Total\n");
    for ((year, age), (f, m)) in &cells {
        let age_tok = if *age == 110 {
            "110+".to_string()
        } else {
            age.to_string()
        };
        let fmt_rate = |r: &Option<f64>| match r {
            Some(v) => format!("{v:.8e}"),
            None => ".".to_string(),
        };
        let total = match (f, m) {
            (Some(a), Some(b)) => format!("{:.8e}", 0.5 * (a + b)),
            (Some(a), None) | (None, Some(a)) => format!("{a:.8e}"),
            (None, None) => ".".to_string(),
        };
        out.push_str(&format!(
            "  {year}      {age_tok:>6}      {}      {}      {}\n",
            fmt_rate(f),
            fmt_rate(m),
            total
        ));
    }
    out
}
