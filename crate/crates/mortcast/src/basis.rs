//! Design-matrix blocks and penalty matrices for smooth terms.
//!
//! One-dimensional smooths use a cubic regression spline basis parameterized
//! by function values at the knots, with natural boundary conditions. The
//! basis evaluates to a straight line beyond the boundary knots (value and
//! first derivative continue), which is what makes forecasting beyond the
//! training covariate range well defined.
//!
//! Smooth kinds built here: centered shrinkage smooths (`ts`-style),
//! by-factor replicated smooths, random-effect smooths (`re`), and factor
//! smooths (`fs`) with penalties shared across levels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("need at least {needed} distinct covariate values, found {found}")]
    Rank { needed: usize, found: usize },
    #[error("basis dimension k={k} must be at least 3")]
    KTooSmall { k: usize },
    #[error("knots must be strictly increasing")]
    BadKnots,
    #[error("factor must have at least 2 levels")]
    DegenerateFactor,
    #[error("factor level {level} has fewer than 2 distinct covariate values")]
    DegenerateLevel { level: usize },
    #[error("penalty order m={m} not supported (use 1 or 2)")]
    BadPenaltyOrder { m: usize },
    #[error("operation requires a {expected} block")]
    WrongBlockKind { expected: &'static str },
    #[error("operation requires exactly one penalty, found {found}")]
    PenaltyCount { found: usize },
}

/// Cubic regression spline on a fixed knot sequence.
///
/// Coefficients are the function values at the knots; second derivatives at
/// interior knots follow from the natural-spline continuity system
/// `B gamma = D beta`. `fmat` maps coefficients to second derivatives at all
/// knots (zero rows at the ends).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrsBasis {
    pub knots: Vec<f64>,
    fmat: DMatrix<f64>,
}

impl CrsBasis {
    pub fn from_knots(knots: Vec<f64>) -> Result<CrsBasis, BasisError> {
        let k = knots.len();
        if k < 3 {
            return Err(BasisError::KTooSmall { k });
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BasisError::BadKnots);
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let interior = k - 2;
        let mut b = DMatrix::<f64>::zeros(interior, interior);
        let mut d = DMatrix::<f64>::zeros(interior, k);
        for r in 0..interior {
            b[(r, r)] = (h[r] + h[r + 1]) / 3.0;
            if r + 1 < interior {
                b[(r, r + 1)] = h[r + 1] / 6.0;
                b[(r + 1, r)] = h[r + 1] / 6.0;
            }
            d[(r, r)] = 1.0 / h[r];
            d[(r, r + 1)] = -1.0 / h[r] - 1.0 / h[r + 1];
            d[(r, r + 2)] = 1.0 / h[r + 1];
        }
        let binv_d = b
            .clone()
            .cholesky()
            .expect("continuity system is positive definite")
            .solve(&d);
        // Pad with zero rows for the natural end conditions.
        let mut fmat = DMatrix::<f64>::zeros(k, k);
        fmat.view_mut((1, 0), (interior, k)).copy_from(&binv_d);
        Ok(CrsBasis { knots, fmat })
    }

    /// Knots at quantiles of the distinct covariate values.
    pub fn from_quantiles(x: &[f64], k: usize) -> Result<CrsBasis, BasisError> {
        if k < 3 {
            return Err(BasisError::KTooSmall { k });
        }
        let mut u: Vec<f64> = x.to_vec();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        u.dedup();
        if u.len() < k {
            return Err(BasisError::Rank {
                needed: k,
                found: u.len(),
            });
        }
        let m = u.len();
        let knots: Vec<f64> = (0..k)
            .map(|i| u[(i * (m - 1) + (k - 1) / 2) / (k - 1)])
            .collect();
        CrsBasis::from_knots(knots)
    }

    pub fn k(&self) -> usize {
        self.knots.len()
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    fn f_row(&self, j: usize) -> DVector<f64> {
        let k = self.k();
        DVector::from_iterator(k, (0..k).map(|c| self.fmat[(j, c)]))
    }

    fn interval_of(&self, x: f64) -> usize {
        let k = self.k();
        match self
            .knots
            .binary_search_by(|t| t.partial_cmp(&x).unwrap())
        {
            Ok(j) => j.min(k - 2),
            Err(j) => j.saturating_sub(1).min(k - 2),
        }
    }

    /// Basis row at `x`, linearly extended beyond the boundary knots.
    pub fn eval_row(&self, x: f64) -> DVector<f64> {
        let (lo, hi) = self.boundary();
        if x < lo {
            let mut r = self.eval_row_inside(lo);
            r.axpy(x - lo, &self.deriv_row_inside(lo), 1.0);
            r
        } else if x > hi {
            let mut r = self.eval_row_inside(hi);
            r.axpy(x - hi, &self.deriv_row_inside(hi), 1.0);
            r
        } else {
            self.eval_row_inside(x)
        }
    }

    /// First-derivative row at `x` (constant beyond the boundary knots).
    pub fn deriv_row(&self, x: f64) -> DVector<f64> {
        let (lo, hi) = self.boundary();
        self.deriv_row_inside(x.clamp(lo, hi))
    }

    fn eval_row_inside(&self, x: f64) -> DVector<f64> {
        let j = self.interval_of(x);
        let (t0, t1) = (self.knots[j], self.knots[j + 1]);
        let h = t1 - t0;
        let am = (t1 - x) / h;
        let ap = (x - t0) / h;
        let cm = ((t1 - x).powi(3) / h - h * (t1 - x)) / 6.0;
        let cp = ((x - t0).powi(3) / h - h * (x - t0)) / 6.0;
        let mut r = DVector::zeros(self.k());
        r[j] += am;
        r[j + 1] += ap;
        r.axpy(cm, &self.f_row(j), 1.0);
        r.axpy(cp, &self.f_row(j + 1), 1.0);
        r
    }

    fn deriv_row_inside(&self, x: f64) -> DVector<f64> {
        let j = self.interval_of(x);
        let (t0, t1) = (self.knots[j], self.knots[j + 1]);
        let h = t1 - t0;
        let cmd = (-3.0 * (t1 - x).powi(2) / h + h) / 6.0;
        let cpd = (3.0 * (x - t0).powi(2) / h - h) / 6.0;
        let mut r = DVector::zeros(self.k());
        r[j] -= 1.0 / h;
        r[j + 1] += 1.0 / h;
        r.axpy(cmd, &self.f_row(j), 1.0);
        r.axpy(cpd, &self.f_row(j + 1), 1.0);
        r
    }

    /// Integrated squared second derivative, in closed form from the
    /// continuity system: `S = D^T B^{-1} D`.
    pub fn penalty_d2(&self) -> DMatrix<f64> {
        let k = self.k();
        let h: Vec<f64> = self.knots.windows(2).map(|w| w[1] - w[0]).collect();
        let interior = k - 2;
        let mut b = DMatrix::<f64>::zeros(interior, interior);
        let mut d = DMatrix::<f64>::zeros(interior, k);
        for r in 0..interior {
            b[(r, r)] = (h[r] + h[r + 1]) / 3.0;
            if r + 1 < interior {
                b[(r, r + 1)] = h[r + 1] / 6.0;
                b[(r + 1, r)] = h[r + 1] / 6.0;
            }
            d[(r, r)] = 1.0 / h[r];
            d[(r, r + 1)] = -1.0 / h[r] - 1.0 / h[r + 1];
            d[(r, r + 2)] = 1.0 / h[r + 1];
        }
        let binv_d = b.cholesky().expect("positive definite").solve(&d);
        let mut s = d.transpose() * binv_d;
        symmetrize(&mut s);
        s
    }

    /// Integrated squared first derivative by exact Gauss-Legendre
    /// quadrature (the derivative is piecewise quadratic, so three nodes
    /// per interval integrate its square exactly).
    pub fn penalty_d1(&self) -> DMatrix<f64> {
        self.quadrature_penalty(|x| self.deriv_row_inside(x), 1)
    }

    /// Quadrature route to the second-derivative penalty; used as an
    /// independent cross-check of `penalty_d2`.
    pub fn penalty_d2_quadrature(&self) -> DMatrix<f64> {
        let f = &self.fmat;
        self.quadrature_penalty(
            |x| {
                let j = self.interval_of(x);
                let (t0, t1) = (self.knots[j], self.knots[j + 1]);
                let h = t1 - t0;
                let wm = (t1 - x) / h;
                let wp = (x - t0) / h;
                let k = self.k();
                DVector::from_iterator(k, (0..k).map(|c| wm * f[(j, c)] + wp * f[(j + 1, c)]))
            },
            2,
        )
    }

    fn quadrature_penalty<F>(&self, row: F, _order: usize) -> DMatrix<f64>
    where
        F: Fn(f64) -> DVector<f64>,
    {
        const NODES: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
        const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let k = self.k();
        let mut s = DMatrix::<f64>::zeros(k, k);
        for j in 0..k - 1 {
            let (t0, t1) = (self.knots[j], self.knots[j + 1]);
            let half = (t1 - t0) / 2.0;
            let mid = (t0 + t1) / 2.0;
            for (node, w) in NODES.iter().zip(WEIGHTS) {
                let r = row(mid + half * node);
                s.ger(w * half, &r, &r, 1.0);
            }
        }
        symmetrize(&mut s);
        s
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// A symmetric PSD penalty stored as diagonal blocks inside a column span.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub dim: usize,
    pub blocks: Vec<PenaltyBlock>,
}

#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub offset: usize,
    pub mat: DMatrix<f64>,
}

impl Penalty {
    pub fn single(mat: DMatrix<f64>) -> Penalty {
        let dim = mat.nrows();
        Penalty {
            dim,
            blocks: vec![PenaltyBlock { offset: 0, mat }],
        }
    }

    pub fn identity(dim: usize) -> Penalty {
        Penalty {
            dim,
            blocks: (0..dim)
                .map(|offset| PenaltyBlock {
                    offset,
                    mat: DMatrix::identity(1, 1),
                })
                .collect(),
        }
    }

    /// Same block repeated per level, stride `k`.
    pub fn replicated(mat: DMatrix<f64>, n_levels: usize) -> Penalty {
        let k = mat.nrows();
        Penalty {
            dim: n_levels * k,
            blocks: (0..n_levels)
                .map(|l| PenaltyBlock {
                    offset: l * k,
                    mat: mat.clone(),
                })
                .collect(),
        }
    }

    pub fn quad_form(&self, beta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for b in &self.blocks {
            let p = b.mat.nrows();
            for i in 0..p {
                for j in 0..p {
                    acc += beta[b.offset + i] * b.mat[(i, j)] * beta[b.offset + j];
                }
            }
        }
        acc
    }

    /// Dense materialization, for oracles and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim, self.dim);
        for b in &self.blocks {
            let p = b.mat.nrows();
            s.view_mut((b.offset, b.offset), (p, p)).copy_from(&b.mat);
        }
        s
    }

    /// Rank and log-product of strictly positive eigenvalues, summed over
    /// blocks. `tol` is relative to each block's largest eigenvalue.
    pub fn rank_and_logdet_plus(&self, tol: f64) -> (usize, f64) {
        let mut rank = 0usize;
        let mut logdet = 0.0;
        for b in &self.blocks {
            let eig = b.mat.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            for &ev in eig.eigenvalues.iter() {
                if ev > tol * max.max(1e-300) {
                    rank += 1;
                    logdet += ev.ln();
                }
            }
        }
        (rank, logdet)
    }
}

/// Column storage of one smooth block.
#[derive(Debug, Clone)]
pub enum BlockCols {
    /// Plain dense `n x p` columns.
    Dense(DMatrix<f64>),
    /// Per-level replicated columns: row `i` is nonzero only in the `k`
    /// columns of its level, with values `vals.row(i)`.
    LevelMasked {
        level_of_row: Vec<usize>,
        vals: DMatrix<f64>,
        n_levels: usize,
        k: usize,
    },
}

impl BlockCols {
    pub fn nrows(&self) -> usize {
        match self {
            BlockCols::Dense(m) => m.nrows(),
            BlockCols::LevelMasked { level_of_row, .. } => level_of_row.len(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            BlockCols::Dense(m) => m.ncols(),
            BlockCols::LevelMasked { n_levels, k, .. } => n_levels * k,
        }
    }

    /// Visit the nonzero (local column, value) entries of one row.
    pub fn visit_row<F: FnMut(usize, f64)>(&self, i: usize, mut f: F) {
        match self {
            BlockCols::Dense(m) => {
                for j in 0..m.ncols() {
                    f(j, m[(i, j)]);
                }
            }
            BlockCols::LevelMasked {
                level_of_row,
                vals,
                k,
                ..
            } => {
                let base = level_of_row[i] * k;
                for j in 0..*k {
                    f(base + j, vals[(i, j)]);
                }
            }
        }
    }

    /// Dense materialization, for oracles and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols());
        for i in 0..self.nrows() {
            self.visit_row(i, |j, v| m[(i, j)] = v);
        }
        m
    }
}

/// A complete design block for one smooth term: columns, penalties (one
/// smoothing parameter each), and enough metadata to re-evaluate the block
/// for new data.
#[derive(Debug, Clone)]
pub struct SmoothBlock {
    pub cols: BlockCols,
    pub penalties: Vec<Penalty>,
    pub knots: Vec<f64>,
    pub boundary: Option<(f64, f64)>,
    /// Centering transform applied to columns and penalties, if any.
    pub centering: Option<DMatrix<f64>>,
}

impl SmoothBlock {
    pub fn ncols(&self) -> usize {
        self.cols.ncols()
    }
}

/// Cubic-regression-spline block with the integrated-squared-second-
/// derivative penalty. Knots default to quantiles of `x`.
pub fn crs_basis(x: &[f64], k: usize, knots: Option<Vec<f64>>) -> Result<SmoothBlock, BasisError> {
    let basis = match knots {
        Some(kn) => CrsBasis::from_knots(kn)?,
        None => CrsBasis::from_quantiles(x, k)?,
    };
    let block = crs_block_from(&basis, x);
    Ok(block)
}

/// Evaluate an existing CRS basis over `x` as a dense block.
pub fn crs_block_from(basis: &CrsBasis, x: &[f64]) -> SmoothBlock {
    let k = basis.k();
    let mut cols = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        cols.row_mut(i).copy_from(&basis.eval_row(xi).transpose());
    }
    SmoothBlock {
        cols: BlockCols::Dense(cols),
        penalties: vec![Penalty::single(basis.penalty_d2())],
        knots: basis.knots.clone(),
        boundary: Some(basis.boundary()),
        centering: None,
    }
}

/// Inflate the penalty's zero eigenvalues so the whole term can shrink to
/// zero (the `ts`-style shrinkage smooth). `eps` scales the smallest
/// strictly positive eigenvalue.
pub fn shrinkage_modify(mut block: SmoothBlock, eps: f64) -> Result<SmoothBlock, BasisError> {
    if block.penalties.len() != 1 {
        return Err(BasisError::PenaltyCount {
            found: block.penalties.len(),
        });
    }
    if eps == 0.0 {
        return Ok(block);
    }
    let penalty = &block.penalties[0];
    let mut new_blocks = Vec::with_capacity(penalty.blocks.len());
    for b in &penalty.blocks {
        new_blocks.push(PenaltyBlock {
            offset: b.offset,
            mat: inflate_nullspace(&b.mat, eps),
        });
    }
    block.penalties[0].blocks = new_blocks;
    Ok(block)
}

/// Shrinkage modification of a bare penalty matrix: zero eigenvalues are
/// replaced by `eps` times the smallest strictly positive one.
pub fn inflate_nullspace_of(s: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    inflate_nullspace(s, eps)
}

/// Projector onto the penalty's nullspace, `U0 U0^T`.
pub fn nullspace_projector_of(s: &DMatrix<f64>) -> DMatrix<f64> {
    nullspace_projector(s)
}

fn inflate_nullspace(s: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * max.max(1e-300);
    let min_pos = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > tol)
        .fold(f64::INFINITY, f64::min);
    let vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v > tol { v } else { eps * min_pos })
        .collect();
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for (idx, &v) in vals.iter().enumerate() {
        let u = eig.eigenvectors.column(idx);
        out.ger(v, &u, &u, 1.0);
    }
    symmetrize(&mut out);
    out
}

/// Orthonormal basis of the nullspace (eigenvalues below `tol` relative to
/// the largest), projected back as `U0 U0^T`.
fn nullspace_projector(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * max.max(1e-300);
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for (idx, &v) in eig.eigenvalues.iter().enumerate() {
        if v <= tol {
            let u = eig.eigenvectors.column(idx);
            out.ger(1.0, &u, &u, 1.0);
        }
    }
    symmetrize(&mut out);
    out
}

/// Absorb a sum-to-zero constraint over the training rows: columns are
/// transformed so each sums to zero, dropping one dimension.
pub fn center_constraint(block: SmoothBlock) -> Result<SmoothBlock, BasisError> {
    let dense = match &block.cols {
        BlockCols::Dense(m) => m,
        _ => return Err(BasisError::WrongBlockKind { expected: "dense" }),
    };
    let p = dense.ncols();
    let sums = DVector::from_iterator(p, (0..p).map(|j| dense.column(j).sum()));
    let z = householder_complement(&sums);
    let new_cols = dense * &z;
    let mut new_penalties = Vec::with_capacity(block.penalties.len());
    for pen in &block.penalties {
        let s = pen.to_dense();
        let mut zt_s_z = z.transpose() * s * &z;
        symmetrize(&mut zt_s_z);
        new_penalties.push(Penalty::single(zt_s_z));
    }
    Ok(SmoothBlock {
        cols: BlockCols::Dense(new_cols),
        penalties: new_penalties,
        knots: block.knots,
        boundary: block.boundary,
        centering: Some(z),
    })
}

/// Orthonormal `p x (p-1)` basis of the hyperplane orthogonal to `v`.
fn householder_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let p = v.len();
    let norm = v.norm();
    let mut u = v.clone();
    u[0] += if v[0] >= 0.0 { norm } else { -norm };
    let unorm2 = u.norm_squared();
    // H = I - 2 u u^T / |u|^2 maps v to a multiple of e_1; columns 1..p of H
    // are an orthonormal basis of v's orthogonal complement.
    let mut z = DMatrix::zeros(p, p - 1);
    for j in 1..p {
        for i in 0..p {
            let h = if i == j { 1.0 } else { 0.0 };
            z[(i, j - 1)] = h - 2.0 * u[i] * u[j] / unorm2;
        }
    }
    z
}

/// Indicator block with a ridge penalty: i.i.d. random intercepts per level.
pub fn re_basis(factor: &[usize], n_levels: usize) -> Result<SmoothBlock, BasisError> {
    if n_levels < 2 {
        return Err(BasisError::DegenerateFactor);
    }
    let n = factor.len();
    Ok(SmoothBlock {
        cols: BlockCols::LevelMasked {
            level_of_row: factor.to_vec(),
            vals: DMatrix::from_element(n, 1, 1.0),
            n_levels,
            k: 1,
        },
        penalties: vec![Penalty::identity(n_levels)],
        knots: Vec::new(),
        boundary: None,
        centering: None,
    })
}

/// Factor smooth: one spline curve per level on shared knots, with two
/// penalties shared across all levels — an order-`m` roughness penalty and
/// a ridge on each level's roughness nullspace, so every curve is fully
/// shrinkable. No centering is applied.
pub fn fs_basis(
    x: &[f64],
    factor: &[usize],
    n_levels: usize,
    k: usize,
    m: usize,
) -> Result<SmoothBlock, BasisError> {
    if n_levels < 2 {
        return Err(BasisError::DegenerateFactor);
    }
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
            return Err(BasisError::DegenerateLevel { level });
        }
    }
    let basis = CrsBasis::from_quantiles(x, k)?;
    fs_block_from(&basis, x, factor, n_levels, m)
}

/// Evaluate an existing shared-knot basis as an fs block.
pub fn fs_block_from(
    basis: &CrsBasis,
    x: &[f64],
    factor: &[usize],
    n_levels: usize,
    m: usize,
) -> Result<SmoothBlock, BasisError> {
    let k = basis.k();
    let rough = match m {
        1 => basis.penalty_d1(),
        2 => basis.penalty_d2(),
        m => return Err(BasisError::BadPenaltyOrder { m }),
    };
    let ridge = nullspace_projector(&rough);
    let mut vals = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        vals.row_mut(i).copy_from(&basis.eval_row(xi).transpose());
    }
    Ok(SmoothBlock {
        cols: BlockCols::LevelMasked {
            level_of_row: factor.to_vec(),
            vals,
            n_levels,
            k,
        },
        penalties: vec![
            Penalty::replicated(rough, n_levels),
            Penalty::replicated(ridge, n_levels),
        ],
        knots: basis.knots.clone(),
        boundary: Some(basis.boundary()),
        centering: None,
    })
}

/// Replicate a dense smooth block per factor level, zeroing it outside each
/// level's rows. Every level gets its own copy of each input penalty and
/// thus its own smoothing parameter.
pub fn by_interaction(
    block: SmoothBlock,
    factor: &[usize],
    n_levels: usize,
) -> Result<SmoothBlock, BasisError> {
    let dense = match block.cols {
        BlockCols::Dense(m) => m,
        _ => return Err(BasisError::WrongBlockKind { expected: "dense" }),
    };
    if n_levels == 1 {
        return Ok(SmoothBlock {
            cols: BlockCols::Dense(dense),
            penalties: block.penalties,
            knots: block.knots,
            boundary: block.boundary,
            centering: block.centering,
        });
    }
    let k = dense.ncols();
    let mut penalties = Vec::with_capacity(n_levels * block.penalties.len());
    for level in 0..n_levels {
        for pen in &block.penalties {
            let blocks = pen
                .blocks
                .iter()
                .map(|b| PenaltyBlock {
                    offset: level * k + b.offset,
                    mat: b.mat.clone(),
                })
                .collect();
            penalties.push(Penalty {
                dim: n_levels * k,
                blocks,
            });
        }
    }
    Ok(SmoothBlock {
        cols: BlockCols::LevelMasked {
            level_of_row: factor.to_vec(),
            vals: dense,
            n_levels,
            k,
        },
        penalties,
        knots: block.knots,
        boundary: block.boundary,
        centering: block.centering,
    })
}
