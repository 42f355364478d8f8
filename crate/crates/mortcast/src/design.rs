//! Model specification and design assembly.
//!
//! A [`ModelSpec`] declares the parametric terms and smooth terms of a
//! model. [`ModelTerms`] binds the spec to a training frame: it fixes knot
//! sequences, centering transforms, and factor level tables, and is the
//! single code path used to build design rows for training, trim-refit, and
//! prediction, so bases are guaranteed to evaluate identically everywhere.
//!
//! The assembled [`Design`] stores the sparse design row-wise together with
//! the penalty list and a group partition of the columns: masked column
//! blocks that share rows end up in the same group, globally dense columns
//! form a border. The solver exploits this block-arrow structure.

use crate::basis::{
    by_interaction, center_constraint, crs_block_from, fs_block_from, re_basis, shrinkage_modify,
    BasisError, CrsBasis, Penalty,
};
use crate::covariates::{FrameRow, ModelFrame};
use crate::data::Gender;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("frame is empty")]
    EmptyFrame,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("term `{term}`: unseen factor level `{level}`")]
    UnseenLevel { term: String, level: String },
    #[error("column {col} ({what}) is identically zero; parametric coding is rank deficient")]
    ZeroColumn { col: usize, what: String },
    #[error("penalty block for `{term}` crosses a group boundary")]
    PenaltySplit { term: String },
    #[error("model spec: {0}")]
    BadSpec(String),
}

/// Continuous covariates a smooth can be built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateName {
    Kt,
    Kct,
    Cohort,
}

impl CovariateName {
    pub fn value(&self, row: &FrameRow) -> f64 {
        match self {
            CovariateName::Kt => row.kt,
            CovariateName::Kct => row.kct,
            CovariateName::Cohort => row.cohort as f64,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CovariateName::Kt => "kt",
            CovariateName::Kct => "kct",
            CovariateName::Cohort => "cohort",
        }
    }
}

/// Grouping factors a smooth can interact with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorName {
    Age,
    GenderAge,
    CountryGenderAge,
}

impl FactorName {
    pub fn key(&self, row: &FrameRow) -> String {
        match self {
            FactorName::Age => format!("{}", row.age),
            FactorName::GenderAge => format!("{}:{}", row.gender, row.age),
            FactorName::CountryGenderAge => {
                format!("{}:{}:{}", row.country, row.gender, row.age)
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FactorName::Age => "age",
            FactorName::GenderAge => "gender:age",
            FactorName::CountryGenderAge => "country:gender:age",
        }
    }
}

/// Factor level table frozen at training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorTable {
    pub name: FactorName,
    pub levels: Vec<String>,
}

impl FactorTable {
    pub fn build(name: FactorName, frame: &ModelFrame) -> FactorTable {
        let mut levels: Vec<String> = frame.rows.iter().map(|r| name.key(r)).collect();
        levels.sort();
        levels.dedup();
        FactorTable { name, levels }
    }

    pub fn index_of(&self, row: &FrameRow) -> Option<usize> {
        let key = self.name.key(row);
        self.levels.binary_search(&key).ok()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// The smooth constructions the engine supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothKind {
    /// Centered 1-D cubic spline with a shrinkage-modified penalty.
    CenteredShrinkage1d,
    /// Centered shrinkage smooth replicated per factor level, one smoothing
    /// parameter per level.
    ByShrinkage1d,
    /// Random intercepts: indicator block with a ridge penalty.
    Re,
    /// Factor smooth: per-level curves with two shared smoothing parameters.
    Fs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothTermSpec {
    pub name: String,
    pub kind: SmoothKind,
    pub covariate: Option<CovariateName>,
    pub factor: Option<FactorName>,
    pub k: usize,
    pub m: usize,
    pub shrink_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParametricSpec {
    /// Intercept + age contrasts + male:age contrasts.
    AgeGenderAge,
    /// Intercept + age contrasts.
    AgeOnly,
}

/// Declarative model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub parametric: ParametricSpec,
    pub smooths: Vec<SmoothTermSpec>,
}

impl ModelSpec {
    /// The multi-population model: age + gender:age parametric terms,
    /// centered shrinkage smooths of `k_ct` (global and by gender:age) and
    /// cohort, random intercepts per country:gender:age, and factor smooths
    /// of `k_t` and cohort over country:gender:age with m = 1.
    pub fn multi_population(k_main: usize, k_fs: usize, shrink_eps: f64) -> ModelSpec {
        let smooth = |name: &str, kind, covariate, factor, k, m| SmoothTermSpec {
            name: name.to_string(),
            kind,
            covariate,
            factor,
            k,
            m,
            shrink_eps,
        };
        ModelSpec {
            parametric: ParametricSpec::AgeGenderAge,
            smooths: vec![
                smooth(
                    "s(kct)",
                    SmoothKind::CenteredShrinkage1d,
                    Some(CovariateName::Kct),
                    None,
                    k_main,
                    2,
                ),
                smooth(
                    "s(kct,by=gender:age)",
                    SmoothKind::ByShrinkage1d,
                    Some(CovariateName::Kct),
                    Some(FactorName::GenderAge),
                    k_main,
                    2,
                ),
                smooth(
                    "s(cohort)",
                    SmoothKind::CenteredShrinkage1d,
                    Some(CovariateName::Cohort),
                    None,
                    k_main,
                    2,
                ),
                smooth(
                    "s(country:gender:age,re)",
                    SmoothKind::Re,
                    None,
                    Some(FactorName::CountryGenderAge),
                    0,
                    0,
                ),
                smooth(
                    "s(kt,country:gender:age,fs,m=1)",
                    SmoothKind::Fs,
                    Some(CovariateName::Kt),
                    Some(FactorName::CountryGenderAge),
                    k_fs,
                    1,
                ),
                smooth(
                    "s(cohort,country:gender:age,fs,m=1)",
                    SmoothKind::Fs,
                    Some(CovariateName::Cohort),
                    Some(FactorName::CountryGenderAge),
                    k_fs,
                    1,
                ),
            ],
        }
    }

    /// The single-population model: age intercepts plus a factor smooth of
    /// `k_t` per age with m = 1.
    pub fn single_population(k_fs: usize) -> ModelSpec {
        ModelSpec {
            parametric: ParametricSpec::AgeOnly,
            smooths: vec![SmoothTermSpec {
                name: "s(kt,age,fs,m=1)".to_string(),
                kind: SmoothKind::Fs,
                covariate: Some(CovariateName::Kt),
                factor: Some(FactorName::Age),
                k: k_fs,
                m: 1,
                shrink_eps: 0.0,
            }],
        }
    }

    pub fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = match self.parametric {
            ParametricSpec::AgeGenderAge => vec!["age".into(), "gender:age".into()],
            ParametricSpec::AgeOnly => vec!["age".into()],
        };
        names.extend(self.smooths.iter().map(|s| s.name.clone()));
        names
    }
}

/// Metadata for one smooth term, frozen at training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothMeta {
    pub spec: SmoothTermSpec,
    pub col_start: usize,
    pub col_end: usize,
    pub lambda_start: usize,
    pub lambda_end: usize,
    pub basis: Option<CrsBasis>,
    pub centering: Option<DMatrix<f64>>,
    pub factor: Option<FactorTable>,
    pub n_levels: usize,
    /// Columns contributed per level (total columns for dense terms).
    pub k_eff: usize,
    /// Covariate range seen at training.
    pub boundary: Option<(f64, f64)>,
}

/// A penalty placed in the global column space, tied to one smoothing
/// parameter.
#[derive(Debug, Clone)]
pub struct GlobalPenalty {
    pub term: String,
    pub lambda_idx: usize,
    pub col_offset: usize,
    pub penalty: Penalty,
}

/// A model spec bound to training data: knots, centerings, factor tables,
/// and the column layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelTerms {
    pub spec: ModelSpec,
    /// Sorted ages present at training; the first is the reference level.
    pub ages: Vec<u32>,
    pub has_gender_interaction: bool,
    pub parametric_cols: usize,
    pub smooths: Vec<SmoothMeta>,
    pub p: usize,
    pub n_lambdas: usize,
    #[serde(skip)]
    penalties: Vec<GlobalPenalty>,
}

impl ModelTerms {
    pub fn build(frame: &ModelFrame, spec: &ModelSpec) -> Result<ModelTerms, DesignError> {
        if frame.rows.is_empty() {
            return Err(DesignError::EmptyFrame);
        }
        let mut ages: Vec<u32> = frame.rows.iter().map(|r| r.age).collect();
        ages.sort_unstable();
        ages.dedup();
        let has_gender_interaction = matches!(spec.parametric, ParametricSpec::AgeGenderAge);
        let parametric_cols = match spec.parametric {
            // intercept + (n_ages - 1) age contrasts + n_ages male:age cols
            ParametricSpec::AgeGenderAge => 1 + (ages.len() - 1) + ages.len(),
            ParametricSpec::AgeOnly => 1 + (ages.len() - 1),
        };

        let mut col = parametric_cols;
        let mut lambda = 0usize;
        let mut smooths = Vec::with_capacity(spec.smooths.len());
        let mut penalties = Vec::new();

        for term in &spec.smooths {
            let x: Option<Vec<f64>> = term
                .covariate
                .map(|c| frame.rows.iter().map(|r| c.value(r)).collect());
            let factor_table = term.factor.map(|f| FactorTable::build(f, frame));
            let factor_idx: Option<Vec<usize>> = factor_table.as_ref().map(|t| {
                frame
                    .rows
                    .iter()
                    .map(|r| t.index_of(r).expect("level built from this frame"))
                    .collect()
            });

            let (block, basis) = match term.kind {
                SmoothKind::CenteredShrinkage1d => {
                    let x = x.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a covariate", term.name))
                    })?;
                    let basis = CrsBasis::from_quantiles(x, term.k)?;
                    let block = center_constraint(crs_block_from(&basis, x))?;
                    (shrinkage_modify(block, term.shrink_eps)?, Some(basis))
                }
                SmoothKind::ByShrinkage1d => {
                    let x = x.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a covariate", term.name))
                    })?;
                    let factor = factor_idx.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a factor", term.name))
                    })?;
                    let basis = CrsBasis::from_quantiles(x, term.k)?;
                    let block = center_constraint(crs_block_from(&basis, x))?;
                    let block = shrinkage_modify(block, term.shrink_eps)?;
                    (
                        by_interaction(block, factor, factor_table.as_ref().unwrap().len())?,
                        Some(basis),
                    )
                }
                SmoothKind::Re => {
                    let factor = factor_idx.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a factor", term.name))
                    })?;
                    (
                        re_basis(factor, factor_table.as_ref().unwrap().len())?,
                        None,
                    )
                }
                SmoothKind::Fs => {
                    let x = x.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a covariate", term.name))
                    })?;
                    let factor = factor_idx.as_ref().ok_or_else(|| {
                        DesignError::BadSpec(format!("term `{}` needs a factor", term.name))
                    })?;
                    let n_levels = factor_table.as_ref().unwrap().len();
                    // Degenerate-level check, then shared knots from pooled x.
                    for level in 0..n_levels {
                        let mut vals: Vec<f64> = x
                            .iter()
                            .zip(factor)
                            .filter(|(_, &l)| l == level)
                            .map(|(&v, _)| v)
                            .collect();
                        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        vals.dedup();
                        if vals.len() < 2 {
                            return Err(BasisError::DegenerateLevel { level }.into());
                        }
                    }
                    let basis = CrsBasis::from_quantiles(x, term.k)?;
                    (
                        fs_block_from(&basis, x, factor, n_levels, term.m)?,
                        Some(basis),
                    )
                }
            };

            let ncols = block.ncols();
            let n_levels = factor_table.as_ref().map(|t| t.len()).unwrap_or(1);
            let k_eff = match term.kind {
                SmoothKind::CenteredShrinkage1d => ncols,
                _ => ncols / n_levels,
            };
            let lambda_start = lambda;
            for penalty in &block.penalties {
                penalties.push(GlobalPenalty {
                    term: term.name.clone(),
                    lambda_idx: lambda,
                    col_offset: col,
                    penalty: penalty.clone(),
                });
                lambda += 1;
            }
            smooths.push(SmoothMeta {
                spec: term.clone(),
                col_start: col,
                col_end: col + ncols,
                lambda_start,
                lambda_end: lambda,
                basis,
                centering: block.centering.clone(),
                factor: factor_table,
                n_levels,
                k_eff,
                boundary: block.boundary,
            });
            col += ncols;
        }

        Ok(ModelTerms {
            spec: spec.clone(),
            ages,
            has_gender_interaction,
            parametric_cols,
            smooths,
            p: col,
            n_lambdas: lambda,
            penalties,
        })
    }

    pub fn penalties(&self) -> &[GlobalPenalty] {
        &self.penalties
    }

    /// Rebuild penalties after deserialization (they are not stored).
    pub fn rebuild_penalties(&mut self) -> Result<(), DesignError> {
        if !self.penalties.is_empty() {
            return Ok(());
        }
        let mut penalties = Vec::new();
        for meta in &self.smooths {
            let term = &meta.spec;
            let mut lambda = meta.lambda_start;
            let block_penalties: Vec<Penalty> = match term.kind {
                SmoothKind::Re => vec![Penalty::identity(meta.n_levels)],
                SmoothKind::Fs => {
                    let basis = meta.basis.as_ref().expect("fs has a basis");
                    let rough = match term.m {
                        1 => basis.penalty_d1(),
                        _ => basis.penalty_d2(),
                    };
                    let ridge = crate::basis::nullspace_projector_of(&rough);
                    vec![
                        Penalty::replicated(rough, meta.n_levels),
                        Penalty::replicated(ridge, meta.n_levels),
                    ]
                }
                SmoothKind::CenteredShrinkage1d | SmoothKind::ByShrinkage1d => {
                    let basis = meta.basis.as_ref().expect("spline smooth has a basis");
                    let z = meta.centering.as_ref().expect("centered smooth");
                    let s = basis.penalty_d2();
                    let mut zsz = z.transpose() * s * z;
                    let half = 0.5 * (&zsz + zsz.transpose());
                    zsz = half;
                    let inflated = crate::basis::inflate_nullspace_of(&zsz, term.shrink_eps);
                    if term.kind == SmoothKind::CenteredShrinkage1d {
                        vec![Penalty::single(inflated)]
                    } else {
                        let single = Penalty::single(inflated);
                        (0..meta.n_levels)
                            .map(|l| Penalty {
                                dim: meta.n_levels * meta.k_eff,
                                blocks: single
                                    .blocks
                                    .iter()
                                    .map(|b| crate::basis::PenaltyBlock {
                                        offset: l * meta.k_eff + b.offset,
                                        mat: b.mat.clone(),
                                    })
                                    .collect(),
                            })
                            .collect()
                    }
                }
            };
            for penalty in block_penalties {
                penalties.push(GlobalPenalty {
                    term: term.name.clone(),
                    lambda_idx: lambda,
                    col_offset: meta.col_start,
                    penalty,
                });
                lambda += 1;
            }
        }
        self.penalties = penalties;
        Ok(())
    }

    fn age_contrast_col(&self, age: u32) -> Option<usize> {
        let idx = self.ages.binary_search(&age).ok()?;
        if idx == 0 {
            None
        } else {
            Some(idx) // column 0 is the intercept; contrasts start at 1
        }
    }

    fn male_age_col(&self, age: u32) -> Option<usize> {
        let idx = self.ages.binary_search(&age).ok()?;
        Some(self.ages.len() + idx)
    }

    /// Sparse design row for one frame row. Fails on factor levels or ages
    /// unseen at training.
    pub fn row_entries(&self, row: &FrameRow) -> Result<Vec<(usize, f64)>, DesignError> {
        let mut out = Vec::with_capacity(48);
        out.push((0usize, 1.0));
        if self.ages.binary_search(&row.age).is_err() {
            return Err(DesignError::UnseenLevel {
                term: "age".into(),
                level: row.age.to_string(),
            });
        }
        if let Some(c) = self.age_contrast_col(row.age) {
            out.push((c, 1.0));
        }
        if self.has_gender_interaction && row.gender == Gender::Male {
            out.push((self.male_age_col(row.age).unwrap(), 1.0));
        }

        for meta in &self.smooths {
            let term = &meta.spec;
            let level = match &meta.factor {
                Some(table) => Some(table.index_of(row).ok_or_else(|| DesignError::UnseenLevel {
                    term: term.name.clone(),
                    level: table.name.key(row),
                })?),
                None => None,
            };
            match term.kind {
                SmoothKind::Re => {
                    out.push((meta.col_start + level.unwrap(), 1.0));
                }
                SmoothKind::Fs => {
                    let basis = meta.basis.as_ref().unwrap();
                    let x = term.covariate.unwrap().value(row);
                    let r = basis.eval_row(x);
                    let offset = meta.col_start + level.unwrap() * meta.k_eff;
                    for j in 0..meta.k_eff {
                        out.push((offset + j, r[j]));
                    }
                }
                SmoothKind::CenteredShrinkage1d | SmoothKind::ByShrinkage1d => {
                    let basis = meta.basis.as_ref().unwrap();
                    let z = meta.centering.as_ref().unwrap();
                    let x = term.covariate.unwrap().value(row);
                    let r = basis.eval_row(x);
                    let rz = z.transpose() * r;
                    let offset = meta.col_start + level.unwrap_or(0) * meta.k_eff;
                    for j in 0..meta.k_eff {
                        out.push((offset + j, rz[j]));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Linear predictor for a frame under coefficients `beta`.
    pub fn predict(&self, rows: &[FrameRow], beta: &[f64]) -> Result<Vec<f64>, DesignError> {
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let entries = self.row_entries(row)?;
            out.push(entries.iter().map(|&(j, v)| beta[j] * v).sum());
        }
        Ok(out)
    }

    /// Assemble the sparse design over a frame.
    pub fn design(&self, frame: &ModelFrame, allow_zero_smooth: bool) -> Result<Design, DesignError> {
        let n = frame.rows.len();
        if n == 0 {
            return Err(DesignError::EmptyFrame);
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0usize);
        for row in &frame.rows {
            let entries = self.row_entries(row)?;
            for (j, v) in entries {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        let y = DVector::from_iterator(n, frame.rows.iter().map(|r| r.y));

        // Zero-column audit.
        let mut nnz = vec![0usize; self.p];
        for (&j, &v) in indices.iter().zip(&values) {
            if v != 0.0 {
                nnz[j] += 1;
            }
        }
        for (j, &count) in nnz.iter().enumerate() {
            if count == 0 {
                let what = self.describe_col(j);
                if j < self.parametric_cols || !allow_zero_smooth {
                    return Err(DesignError::ZeroColumn { col: j, what });
                }
            }
        }

        let groups = self.compute_groups(&indptr, &indices)?;
        let mut term_cols = vec![("parametric".to_string(), (0usize, self.parametric_cols))];
        for meta in &self.smooths {
            term_cols.push((meta.spec.name.clone(), (meta.col_start, meta.col_end)));
        }
        Ok(Design {
            n,
            p: self.p,
            y,
            indptr,
            indices,
            values,
            penalties: self.penalties.clone(),
            groups,
            term_cols,
            n_lambdas: self.n_lambdas,
        })
    }

    fn describe_col(&self, j: usize) -> String {
        if j == 0 {
            return "intercept".into();
        }
        if j < self.parametric_cols {
            if j < self.ages.len() {
                return format!("age contrast {}", self.ages[j]);
            }
            return format!("male:age {}", self.ages[j - self.ages.len()]);
        }
        for meta in &self.smooths {
            if j >= meta.col_start && j < meta.col_end {
                return format!("{} column {}", meta.spec.name, j - meta.col_start);
            }
        }
        "unknown".into()
    }

    /// Partition columns into border (globally dense) columns and groups of
    /// masked blocks that share rows.
    fn compute_groups(&self, indptr: &[usize], indices: &[usize]) -> Result<Groups, DesignError> {
        // Column blocks: usize::MAX marks border columns.
        const BORDER: usize = usize::MAX;
        let mut block_of_col = vec![BORDER; self.p];
        let mut next_block = 0usize;
        // Parametric: intercept is border; each contrast is its own block.
        for j in 1..self.parametric_cols {
            block_of_col[j] = next_block;
            next_block += 1;
        }
        for meta in &self.smooths {
            match meta.spec.kind {
                SmoothKind::CenteredShrinkage1d => {} // dense: border
                _ => {
                    for level in 0..meta.n_levels {
                        for j in 0..meta.k_eff {
                            block_of_col[meta.col_start + level * meta.k_eff + j] = next_block;
                        }
                        next_block += 1;
                    }
                }
            }
        }

        let mut uf = UnionFind::new(next_block);
        let n = indptr.len() - 1;
        for i in 0..n {
            let mut first: Option<usize> = None;
            for &j in &indices[indptr[i]..indptr[i + 1]] {
                let b = block_of_col[j];
                if b == BORDER {
                    continue;
                }
                match first {
                    None => first = Some(b),
                    Some(f) => uf.union(f, b),
                }
            }
        }

        let mut root_to_group: Vec<usize> = vec![usize::MAX; next_block];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut loc = vec![
            Loc::Border { idx: usize::MAX };
            self.p
        ];
        let mut border = Vec::new();
        for j in 0..self.p {
            let b = block_of_col[j];
            if b == BORDER {
                loc[j] = Loc::Border { idx: border.len() };
                border.push(j);
            } else {
                let root = uf.find(b);
                let g = if root_to_group[root] == usize::MAX {
                    root_to_group[root] = groups.len();
                    groups.push(Vec::new());
                    groups.len() - 1
                } else {
                    root_to_group[root]
                };
                loc[j] = Loc::Group {
                    g,
                    idx: groups[g].len(),
                };
                groups[g].push(j);
            }
        }
        Ok(Groups { loc, groups, border })
    }
}

/// Location of a global column in the block-arrow layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loc {
    Group { g: usize, idx: usize },
    Border { idx: usize },
}

#[derive(Debug, Clone)]
pub struct Groups {
    pub loc: Vec<Loc>,
    pub groups: Vec<Vec<usize>>,
    pub border: Vec<usize>,
}

/// Assembled sparse design with penalties and group structure.
#[derive(Debug, Clone)]
pub struct Design {
    pub n: usize,
    pub p: usize,
    pub y: DVector<f64>,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub penalties: Vec<GlobalPenalty>,
    pub groups: Groups,
    pub term_cols: Vec<(String, (usize, usize))>,
    pub n_lambdas: usize,
}

impl Design {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[range.clone()], &self.values[range])
    }

    /// Dense materialization of X, for oracles and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.p);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                x[(i, j)] = v;
            }
        }
        x
    }

    /// Dense total penalty at the given smoothing parameters.
    pub fn dense_penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.p, self.p);
        for gp in &self.penalties {
            let lam = lambdas[gp.lambda_idx];
            for b in &gp.penalty.blocks {
                let off = gp.col_offset + b.offset;
                let pb = b.mat.nrows();
                for i in 0..pb {
                    for j in 0..pb {
                        s[(off + i, off + j)] += lam * b.mat[(i, j)];
                    }
                }
            }
        }
        s
    }

    pub fn xtv(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.p);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &val) in cols.iter().zip(vals) {
                out[j] += val * v[i];
            }
        }
        out
    }

    pub fn xv(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            out[i] = cols.iter().zip(vals).map(|(&j, &v)| v * beta[j]).sum();
        }
        out
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}
