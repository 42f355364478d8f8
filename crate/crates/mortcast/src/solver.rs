//! Penalized least squares via a block-arrow factorization.
//!
//! The design's columns split into groups that never share a row (per-age
//! blocks, typically) plus a small dense border (intercept and centered
//! smooths). `X^T X + S_lambda` is then block-arrow: per-group diagonal
//! blocks, cross blocks against the border, and a border block. We factor
//! each group with Cholesky, form the border Schur complement, and get
//! solves, log-determinants, hat-diagonal entries, and effective degrees of
//! freedom without ever materializing the full p x p system.

use crate::design::{Design, Loc};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("penalized normal equations are not positive definite ({where_})")]
    NotPositiveDefinite { where_: &'static str },
    #[error("expected {expected} smoothing parameters, got {got}")]
    LambdaCount { expected: usize, got: usize },
}

/// One penalty block placed in global column space.
#[derive(Debug, Clone)]
struct PenBlock {
    lambda_idx: usize,
    global_start: usize,
    mat: DMatrix<f64>,
}

/// Precomputed Gram blocks of the design, independent of the smoothing
/// parameters.
pub struct NormalEquations {
    pub p: usize,
    pub n: usize,
    group_cols: Vec<Vec<usize>>,
    border_cols: Vec<usize>,
    loc: Vec<Loc>,
    gram_g: Vec<DMatrix<f64>>,
    cross_g: Vec<DMatrix<f64>>,
    gram_b: DMatrix<f64>,
    xty_g: Vec<DVector<f64>>,
    xty_b: DVector<f64>,
    pub yty: f64,
    pen_blocks: Vec<PenBlock>,
    /// Per group: indices into `pen_blocks` whose span lies in that group.
    group_pens: Vec<Vec<usize>>,
    border_pens: Vec<usize>,
    /// Per column: indices into `pen_blocks` covering it.
    col_pens: Vec<Vec<usize>>,
    /// Per smoothing parameter: which groups (and whether the border) its
    /// penalty blocks touch. Drives incremental refactorization.
    lambda_touch: Vec<LambdaTouch>,
    pub n_lambdas: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LambdaTouch {
    pub groups: Vec<usize>,
    pub border: bool,
}

impl NormalEquations {
    pub fn build(design: &Design) -> NormalEquations {
        let p = design.p;
        let groups = &design.groups;
        let n_groups = groups.groups.len();
        let p_b = groups.border.len();

        let mut gram_g: Vec<DMatrix<f64>> = groups
            .groups
            .iter()
            .map(|g| DMatrix::zeros(g.len(), g.len()))
            .collect();
        let mut cross_g: Vec<DMatrix<f64>> = groups
            .groups
            .iter()
            .map(|g| DMatrix::zeros(g.len(), p_b))
            .collect();
        let mut gram_b = DMatrix::zeros(p_b, p_b);
        let mut xty_g: Vec<DVector<f64>> = groups
            .groups
            .iter()
            .map(|g| DVector::zeros(g.len()))
            .collect();
        let mut xty_b = DVector::zeros(p_b);
        let mut yty = 0.0;

        let mut g_entries: Vec<(usize, usize, f64)> = Vec::with_capacity(64);
        let mut b_entries: Vec<(usize, f64)> = Vec::with_capacity(32);
        for i in 0..design.n {
            let (cols, vals) = design.row(i);
            let yi = design.y[i];
            yty += yi * yi;
            g_entries.clear();
            b_entries.clear();
            for (&j, &v) in cols.iter().zip(vals) {
                match groups.loc[j] {
                    Loc::Group { g, idx } => g_entries.push((g, idx, v)),
                    Loc::Border { idx } => b_entries.push((idx, v)),
                }
            }
            debug_assert!(
                g_entries.windows(2).all(|w| w[0].0 == w[1].0),
                "row {i} spans multiple groups"
            );
            for &(g, a, va) in &g_entries {
                xty_g[g][a] += va * yi;
                for &(_, b, vb) in &g_entries {
                    gram_g[g][(a, b)] += va * vb;
                }
                for &(b, vb) in &b_entries {
                    cross_g[g][(a, b)] += va * vb;
                }
            }
            for &(a, va) in &b_entries {
                xty_b[a] += va * yi;
                for &(b, vb) in &b_entries {
                    gram_b[(a, b)] += va * vb;
                }
            }
        }

        // Place penalty blocks. Group column lists are sorted, and each
        // block spans contiguous global columns inside one group (or the
        // border), so local indices are contiguous too.
        let mut pen_blocks = Vec::new();
        let mut group_pens = vec![Vec::new(); n_groups];
        let mut border_pens = Vec::new();
        let mut col_pens = vec![Vec::new(); p];
        for gp in &design.penalties {
            for b in &gp.penalty.blocks {
                let start = gp.col_offset + b.offset;
                let id = pen_blocks.len();
                for r in 0..b.mat.nrows() {
                    col_pens[start + r].push(id);
                }
                match groups.loc[start] {
                    Loc::Group { g, idx } => {
                        debug_assert!((0..b.mat.nrows()).all(|r| {
                            groups.loc[start + r] == Loc::Group { g, idx: idx + r }
                        }));
                        group_pens[g].push(id);
                    }
                    Loc::Border { idx } => {
                        debug_assert!((0..b.mat.nrows()).all(|r| {
                            groups.loc[start + r] == Loc::Border { idx: idx + r }
                        }));
                        border_pens.push(id);
                    }
                }
                pen_blocks.push(PenBlock {
                    lambda_idx: gp.lambda_idx,
                    global_start: start,
                    mat: b.mat.clone(),
                });
            }
        }

        let mut lambda_touch = vec![LambdaTouch::default(); design.n_lambdas];
        for (g, ids) in group_pens.iter().enumerate() {
            for id in ids {
                let t = &mut lambda_touch[pen_blocks[*id].lambda_idx];
                if t.groups.last() != Some(&g) {
                    t.groups.push(g);
                }
            }
        }
        for id in &border_pens {
            lambda_touch[pen_blocks[*id].lambda_idx].border = true;
        }

        NormalEquations {
            p,
            n: design.n,
            group_cols: groups.groups.clone(),
            border_cols: groups.border.clone(),
            loc: groups.loc.clone(),
            gram_g,
            cross_g,
            gram_b,
            xty_g,
            xty_b,
            yty,
            pen_blocks,
            group_pens,
            border_pens,
            col_pens,
            lambda_touch,
            n_lambdas: design.n_lambdas,
        }
    }

    /// Group Gram block plus its penalty contribution at `lambdas`.
    fn group_matrix(&self, g: usize, lambdas: &[f64]) -> DMatrix<f64> {
        let mut m = self.gram_g[g].clone();
        for id in &self.group_pens[g] {
            let pb = &self.pen_blocks[*id];
            let off = self.local_of(pb);
            let k = pb.mat.nrows();
            let lam = lambdas[pb.lambda_idx];
            for i in 0..k {
                for j in 0..k {
                    m[(off + i, off + j)] += lam * pb.mat[(i, j)];
                }
            }
        }
        m
    }

    fn local_of(&self, pb: &PenBlock) -> usize {
        match self.loc[pb.global_start] {
            Loc::Group { idx, .. } => idx,
            Loc::Border { idx } => idx,
        }
    }

    /// `beta^T S_lambda beta` over the global coefficient vector.
    pub fn penalty_quad(&self, lambdas: &[f64], beta: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for pb in &self.pen_blocks {
            let lam = lambdas[pb.lambda_idx];
            let k = pb.mat.nrows();
            for i in 0..k {
                let bi = beta[pb.global_start + i];
                for j in 0..k {
                    acc += lam * bi * pb.mat[(i, j)] * beta[pb.global_start + j];
                }
            }
        }
        acc
    }

    pub fn factorize(&self, lambdas: &[f64]) -> Result<Factorized, SolverError> {
        if lambdas.len() != self.n_lambdas {
            return Err(SolverError::LambdaCount {
                expected: self.n_lambdas,
                got: lambdas.len(),
            });
        }
        let p_b = self.border_cols.len();
        let n_groups = self.group_cols.len();
        let mut l_g = Vec::with_capacity(n_groups);
        let mut w_g = Vec::with_capacity(n_groups);
        let mut logdet = 0.0;
        let mut schur = self.gram_b.clone();
        for id in &self.border_pens {
            let pb = &self.pen_blocks[*id];
            let off = self.local_of(pb);
            let k = pb.mat.nrows();
            let lam = lambdas[pb.lambda_idx];
            for i in 0..k {
                for j in 0..k {
                    schur[(off + i, off + j)] += lam * pb.mat[(i, j)];
                }
            }
        }
        for g in 0..n_groups {
            let m = self.group_matrix(g, lambdas);
            let chol = m
                .cholesky()
                .ok_or(SolverError::NotPositiveDefinite { where_: "group block" })?;
            let l = chol.l();
            for i in 0..l.nrows() {
                logdet += 2.0 * l[(i, i)].ln();
            }
            let w = l
                .solve_lower_triangular(&self.cross_g[g])
                .expect("triangular solve");
            if p_b > 0 {
                schur.gemm(-1.0, &w.transpose(), &w, 1.0);
            }
            l_g.push(l);
            w_g.push(w);
        }
        let schur_l = if p_b > 0 {
            let chol = schur
                .cholesky()
                .ok_or(SolverError::NotPositiveDefinite { where_: "border Schur" })?;
            let l = chol.l();
            for i in 0..p_b {
                logdet += 2.0 * l[(i, i)].ln();
            }
            l
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(Factorized {
            l_g,
            w_g,
            schur_l,
            logdet,
        })
    }

    /// Full factorization with the extra per-group state that incremental
    /// single-coordinate perturbations need.
    pub fn base_factor(&self, lambdas: &[f64]) -> Result<BaseFactor, SolverError> {
        if lambdas.len() != self.n_lambdas {
            return Err(SolverError::LambdaCount {
                expected: self.n_lambdas,
                got: lambdas.len(),
            });
        }
        let p_b = self.border_cols.len();
        let n_groups = self.group_cols.len();
        let mut parts = Vec::with_capacity(n_groups);
        let mut group_logdet = Vec::with_capacity(n_groups);
        let mut schur_assembled = self.gram_b.clone();
        for id in &self.border_pens {
            let pb = &self.pen_blocks[*id];
            let off = self.local_of(pb);
            let k = pb.mat.nrows();
            let lam = lambdas[pb.lambda_idx];
            for i in 0..k {
                for j in 0..k {
                    schur_assembled[(off + i, off + j)] += lam * pb.mat[(i, j)];
                }
            }
        }
        let mut rhs_b = self.xty_b.clone();
        for g in 0..n_groups {
            let part = self
                .group_part(g, lambdas)
                .ok_or(SolverError::NotPositiveDefinite { where_: "group block" })?;
            schur_assembled -= &part.wtw;
            rhs_b -= &part.wtu;
            group_logdet.push(part.logdet);
            parts.push(part);
        }
        let (schur_l, schur_logdet) = if p_b > 0 {
            let chol = schur_assembled
                .clone()
                .cholesky()
                .ok_or(SolverError::NotPositiveDefinite { where_: "border Schur" })?;
            let l = chol.l();
            let ld = (0..p_b).map(|i| 2.0 * l[(i, i)].ln()).sum();
            (l, ld)
        } else {
            (DMatrix::zeros(0, 0), 0.0)
        };
        let logdet = group_logdet.iter().sum::<f64>() + schur_logdet;
        Ok(BaseFactor {
            lambdas: lambdas.to_vec(),
            parts,
            group_logdet,
            schur_assembled,
            rhs_b,
            schur_l,
            logdet,
        })
    }

    fn group_part(&self, g: usize, lambdas: &[f64]) -> Option<GroupPart> {
        let m = self.group_matrix(g, lambdas);
        let chol = m.cholesky()?;
        let l = chol.l();
        let logdet = (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let w = l.solve_lower_triangular(&self.cross_g[g])?;
        let u = l.solve_lower_triangular(&self.xty_g[g])?;
        let wtw = w.transpose() * &w;
        let wtu = w.transpose() * &u;
        Some(GroupPart {
            l,
            w,
            u,
            wtw,
            wtu,
            logdet,
        })
    }

    /// Back-substitution over all groups, taking each group's factors from
    /// `updated` when present and from `base` otherwise.
    fn solve_with_parts(
        &self,
        updated: &[(usize, GroupPart)],
        base: &[GroupPart],
        schur_l: &DMatrix<f64>,
        rhs_b: &DVector<f64>,
    ) -> DVector<f64> {
        let p_b = self.border_cols.len();
        let beta_b = if p_b > 0 {
            let t = schur_l
                .solve_lower_triangular(rhs_b)
                .expect("triangular solve");
            schur_l
                .tr_solve_lower_triangular(&t)
                .expect("triangular solve")
        } else {
            rhs_b.clone()
        };
        let mut beta = DVector::zeros(self.p);
        for (idx, &j) in self.border_cols.iter().enumerate() {
            beta[j] = beta_b[idx];
        }
        for g in 0..self.group_cols.len() {
            let part = updated
                .iter()
                .find(|(ug, _)| *ug == g)
                .map(|(_, p)| p)
                .unwrap_or(&base[g]);
            let mut v = part.u.clone();
            v.gemv(-1.0, &part.w, &beta_b, 1.0);
            let beta_g = part
                .l
                .tr_solve_lower_triangular(&v)
                .expect("triangular solve");
            for (idx, &j) in self.group_cols[g].iter().enumerate() {
                beta[j] = beta_g[idx];
            }
        }
        beta
    }

    /// Solve at `lambdas` close to `base.lambdas`: only the groups touched
    /// by changed smoothing parameters are refactorized. Returns
    /// `(log det(X'X + S), beta)`. Falls back to a full factorization when
    /// the perturbation touches many groups.
    pub fn solve_perturbed(
        &self,
        base: &BaseFactor,
        lambdas: &[f64],
    ) -> Result<(f64, DVector<f64>), SolverError> {
        let changed: Vec<usize> = (0..self.n_lambdas)
            .filter(|&i| lambdas[i] != base.lambdas[i])
            .collect();
        let mut groups: Vec<usize> = Vec::new();
        let mut border_changed = false;
        for &i in &changed {
            groups.extend_from_slice(&self.lambda_touch[i].groups);
            border_changed |= self.lambda_touch[i].border;
        }
        groups.sort_unstable();
        groups.dedup();
        if groups.len() > self.group_cols.len() / 4 + 1 {
            let fact = self.factorize(lambdas)?;
            let beta = fact.beta(self);
            return Ok((fact.logdet, beta));
        }

        let mut schur = base.schur_assembled.clone();
        let mut rhs_b = base.rhs_b.clone();
        let mut logdet_groups: f64 = base.group_logdet.iter().sum();
        if border_changed {
            for id in &self.border_pens {
                let pb = &self.pen_blocks[*id];
                let delta = lambdas[pb.lambda_idx] - base.lambdas[pb.lambda_idx];
                if delta == 0.0 {
                    continue;
                }
                let off = self.local_of(pb);
                let k = pb.mat.nrows();
                for i in 0..k {
                    for j in 0..k {
                        schur[(off + i, off + j)] += delta * pb.mat[(i, j)];
                    }
                }
            }
        }
        let mut updated: Vec<(usize, GroupPart)> = Vec::with_capacity(groups.len());
        for &g in &groups {
            let part = self
                .group_part(g, lambdas)
                .ok_or(SolverError::NotPositiveDefinite { where_: "group block" })?;
            schur += &base.parts[g].wtw;
            schur -= &part.wtw;
            rhs_b += &base.parts[g].wtu;
            rhs_b -= &part.wtu;
            logdet_groups += part.logdet - base.group_logdet[g];
            updated.push((g, part));
        }
        let p_b = self.border_cols.len();
        let (schur_l, schur_logdet) = if p_b > 0 {
            let chol = schur
                .cholesky()
                .ok_or(SolverError::NotPositiveDefinite { where_: "border Schur" })?;
            let l = chol.l();
            let ld: f64 = (0..p_b).map(|i| 2.0 * l[(i, i)].ln()).sum();
            (l, ld)
        } else {
            (DMatrix::zeros(0, 0), 0.0)
        };
        let beta = self.solve_with_parts(&updated, &base.parts, &schur_l, &rhs_b);
        Ok((logdet_groups + schur_logdet, beta))
    }
}

/// Per-group factorization state kept by [`BaseFactor`].
pub struct GroupPart {
    l: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DVector<f64>,
    wtw: DMatrix<f64>,
    wtu: DVector<f64>,
    logdet: f64,
}

/// Factorization with cached per-group intermediates, supporting cheap
/// solves at nearby smoothing parameters.
pub struct BaseFactor {
    pub lambdas: Vec<f64>,
    parts: Vec<GroupPart>,
    group_logdet: Vec<f64>,
    schur_assembled: DMatrix<f64>,
    rhs_b: DVector<f64>,
    schur_l: DMatrix<f64>,
    pub logdet: f64,
}

impl BaseFactor {
    pub fn beta(&self, ne: &NormalEquations) -> DVector<f64> {
        ne.solve_with_parts(&[], &self.parts, &self.schur_l, &self.rhs_b)
    }
}

/// Cholesky factors of `X^T X + S_lambda` in block-arrow form.
pub struct Factorized {
    l_g: Vec<DMatrix<f64>>,
    w_g: Vec<DMatrix<f64>>,
    schur_l: DMatrix<f64>,
    /// `log det (X^T X + S_lambda)`.
    pub logdet: f64,
}

impl Factorized {
    /// Solve `(X^T X + S) beta = X^T y`, returning global-order coefficients.
    pub fn beta(&self, ne: &NormalEquations) -> DVector<f64> {
        let p_b = ne.border_cols.len();
        let u: Vec<DVector<f64>> = (0..ne.group_cols.len())
            .map(|g| {
                self.l_g[g]
                    .solve_lower_triangular(&ne.xty_g[g])
                    .expect("triangular solve")
            })
            .collect();
        let mut rhs_b = ne.xty_b.clone();
        for g in 0..ne.group_cols.len() {
            rhs_b.gemv(-1.0, &self.w_g[g].transpose(), &u[g], 1.0);
        }
        let beta_b = if p_b > 0 {
            let t = self
                .schur_l
                .solve_lower_triangular(&rhs_b)
                .expect("triangular solve");
            self.schur_l
                .tr_solve_lower_triangular(&t)
                .expect("triangular solve")
        } else {
            rhs_b
        };
        let mut beta = DVector::zeros(ne.p);
        for (idx, &j) in ne.border_cols.iter().enumerate() {
            beta[j] = beta_b[idx];
        }
        for g in 0..ne.group_cols.len() {
            let mut v = u[g].clone();
            v.gemv(-1.0, &self.w_g[g], &beta_b, 1.0);
            let beta_g = self.l_g[g]
                .tr_solve_lower_triangular(&v)
                .expect("triangular solve");
            for (idx, &j) in ne.group_cols[g].iter().enumerate() {
                beta[j] = beta_g[idx];
            }
        }
        beta
    }

    /// Half-reduce a sparse vector: per touched group `z_g = L_g^{-1} a_g`,
    /// plus the Schur-side vector `t = b - sum W_g^T z_g`.
    fn reduce(
        &self,
        ne: &NormalEquations,
        entries: &[(usize, f64)],
    ) -> (Vec<(usize, DVector<f64>)>, DVector<f64>) {
        let p_b = ne.border_cols.len();
        let mut t = DVector::zeros(p_b);
        let mut touched: Vec<(usize, DVector<f64>)> = Vec::with_capacity(2);
        for &(j, v) in entries {
            match ne.loc[j] {
                Loc::Border { idx } => t[idx] += v,
                Loc::Group { g, idx } => {
                    match touched.iter_mut().find(|(tg, _)| *tg == g) {
                        Some((_, a)) => a[idx] += v,
                        None => {
                            let mut a = DVector::zeros(ne.group_cols[g].len());
                            a[idx] = v;
                            touched.push((g, a));
                        }
                    }
                }
            }
        }
        for (g, a) in &mut touched {
            let z = self.l_g[*g]
                .solve_lower_triangular(a)
                .expect("triangular solve");
            t.gemv(-1.0, &self.w_g[*g].transpose(), &z, 1.0);
            *a = z;
        }
        (touched, t)
    }

    /// `x^T (X^T X + S)^{-1} y` for sparse `x`, `y`.
    pub fn bilinear_inv(
        &self,
        ne: &NormalEquations,
        x: &[(usize, f64)],
        y: &[(usize, f64)],
    ) -> f64 {
        let (zx, tx) = self.reduce(ne, x);
        let (zy, ty) = self.reduce(ne, y);
        let mut acc = 0.0;
        for (gx, vx) in &zx {
            if let Some((_, vy)) = zy.iter().find(|(gy, _)| gy == gx) {
                acc += vx.dot(vy);
            }
        }
        if ne.border_cols.is_empty() {
            return acc;
        }
        let sy = self
            .schur_l
            .solve_lower_triangular(&ty)
            .expect("triangular solve");
        let sx = self
            .schur_l
            .solve_lower_triangular(&tx)
            .expect("triangular solve");
        acc + sx.dot(&sy)
    }

    /// Leverages `h_i = x_i^T (X^T X + S)^{-1} x_i` for every design row.
    pub fn hat_diagonal(&self, design: &Design, ne: &NormalEquations) -> Vec<f64> {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(64);
        (0..design.n)
            .map(|i| {
                let (cols, vals) = design.row(i);
                entries.clear();
                entries.extend(cols.iter().copied().zip(vals.iter().copied()));
                let (zx, tx) = self.reduce(ne, &entries);
                let mut h: f64 = zx.iter().map(|(_, z)| z.norm_squared()).sum();
                if !ne.border_cols.is_empty() {
                    let s = self
                        .schur_l
                        .solve_lower_triangular(&tx)
                        .expect("triangular solve");
                    h += s.norm_squared();
                }
                h
            })
            .collect()
    }

    /// Per-column effective degrees of freedom,
    /// `edf_j = [ (X^T X + S)^{-1} X^T X ]_{jj} = 1 - [ F^{-1} S ]_{jj}`.
    pub fn edf_per_column(&self, ne: &NormalEquations, lambdas: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ne.p);
        let mut v: Vec<(usize, f64)> = Vec::with_capacity(32);
        for j in 0..ne.p {
            if ne.col_pens[j].is_empty() {
                out.push(1.0);
                continue;
            }
            v.clear();
            for id in &ne.col_pens[j] {
                let pb = &ne.pen_blocks[*id];
                let lam = lambdas[pb.lambda_idx];
                let r = j - pb.global_start;
                for c in 0..pb.mat.ncols() {
                    v.push((pb.global_start + c, lam * pb.mat[(r, c)]));
                }
            }
            out.push(1.0 - self.bilinear_inv(ne, &[(j, 1.0)], &v));
        }
        out
    }
}

/// One penalized least-squares solve at fixed smoothing parameters.
pub struct PlsFit {
    pub beta: DVector<f64>,
    pub rss: f64,
    pub penalty_quad: f64,
    /// `log det (X^T X + S_lambda)`.
    pub logdet_f: f64,
}

pub fn pls_solve(
    design: &Design,
    ne: &NormalEquations,
    lambdas: &[f64],
) -> Result<(PlsFit, Factorized), SolverError> {
    let fact = ne.factorize(lambdas)?;
    let beta = fact.beta(ne);
    let fitted = design.xv(&beta);
    let rss = (&design.y - fitted).norm_squared();
    let penalty_quad = ne.penalty_quad(lambdas, &beta);
    Ok((
        PlsFit {
            beta,
            rss,
            penalty_quad,
            logdet_f: fact.logdet,
        },
        fact,
    ))
}

/// Dense reference solver for small problems; used to validate the
/// block-arrow path.
pub struct DensePls {
    pub beta: DVector<f64>,
    pub logdet_f: f64,
    pub hat_diag: Vec<f64>,
    pub edf_per_col: Vec<f64>,
    pub rss: f64,
}

pub fn dense_pls(x: &DMatrix<f64>, y: &DVector<f64>, s: &DMatrix<f64>) -> Option<DensePls> {
    let xtx = x.transpose() * x;
    let f = &xtx + s;
    let chol = f.clone().cholesky()?;
    let l = chol.l();
    let logdet_f = (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let beta = chol.solve(&(x.transpose() * y));
    let finv = chol.inverse();
    let hat_diag = (0..x.nrows())
        .map(|i| {
            let xi = x.row(i).transpose();
            (xi.transpose() * &finv * &xi)[(0, 0)]
        })
        .collect();
    let finv_xtx = &finv * &xtx;
    let edf_per_col = (0..x.ncols()).map(|j| finv_xtx[(j, j)]).collect();
    let rss = (y - x * &beta).norm_squared();
    Some(DensePls {
        beta,
        logdet_f,
        hat_diag,
        edf_per_col,
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Penalty;
    use crate::covariates::{attach_covariates, compute_covariates};
    use crate::data::{synth_panel, SynthSpec};
    use crate::design::{GlobalPenalty, Groups, ModelSpec, ModelTerms};
    use approx::assert_relative_eq;

    /// Build a Design directly from dense pieces, with every column in the
    /// border (no group structure) — exercises the Schur-only path.
    fn dense_design(x: DMatrix<f64>, y: Vec<f64>, pens: Vec<GlobalPenalty>) -> Design {
        let (n, p) = (x.nrows(), x.ncols());
        let mut indptr = vec![0usize];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for j in 0..p {
                indices.push(j);
                values.push(x[(i, j)]);
            }
            indptr.push(indices.len());
        }
        let n_lambdas = pens.iter().map(|g| g.lambda_idx + 1).max().unwrap_or(0);
        Design {
            n,
            p,
            y: DVector::from_vec(y),
            indptr,
            indices,
            values,
            penalties: pens,
            groups: Groups {
                loc: (0..p).map(|idx| crate::design::Loc::Border { idx }).collect(),
                groups: vec![],
                border: (0..p).collect(),
            },
            term_cols: vec![],
            n_lambdas,
        }
    }

    fn ridge_penalty(p: usize) -> Vec<GlobalPenalty> {
        vec![GlobalPenalty {
            term: "ridge".into(),
            lambda_idx: 0,
            col_offset: 0,
            penalty: Penalty::identity(p),
        }]
    }

    #[test]
    fn ridge_toy_matches_hand_solution() {
        // X = I, y = (2, 4), lambda = 1: beta = y / 2.
        let design = dense_design(
            DMatrix::identity(2, 2),
            vec![2.0, 4.0],
            ridge_penalty(2),
        );
        let ne = NormalEquations::build(&design);
        let (fit, fact) = pls_solve(&design, &ne, &[1.0]).unwrap();
        assert_relative_eq!(fit.beta[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(fit.beta[1], 2.0, epsilon = 1e-14);
        // rss = 1 + 4, penalty = 1 + 4, logdet = 2 ln 2.
        assert_relative_eq!(fit.rss, 5.0, epsilon = 1e-12);
        assert_relative_eq!(fit.penalty_quad, 5.0, epsilon = 1e-12);
        assert_relative_eq!(fit.logdet_f, 2.0 * 2.0f64.ln(), epsilon = 1e-12);
        // edf per column = 1/2 each.
        let edf = fact.edf_per_column(&ne, &[1.0]);
        assert_relative_eq!(edf[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(edf[1], 0.5, epsilon = 1e-12);
        let h = fact.hat_diagonal(&design, &ne);
        assert_relative_eq!(h[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_penalty_recovers_ols() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 1., 1., 2., 1., 3., 1., 4.]);
        let y = vec![0.1, 1.2, 1.9, 3.1, 4.1];
        let design = dense_design(x.clone(), y.clone(), ridge_penalty(2));
        let ne = NormalEquations::build(&design);
        let (fit, _) = pls_solve(&design, &ne, &[1e-12]).unwrap();
        let yv = DVector::from_vec(y);
        let ols = (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * yv));
        assert_relative_eq!((fit.beta - ols).norm(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 0., 1., 1., 1., 1., -1.]);
        let design = dense_design(x, vec![3.0, -2.0, 1.0, 5.0], ridge_penalty(2));
        let ne = NormalEquations::build(&design);
        let (fit, fact) = pls_solve(&design, &ne, &[1e12]).unwrap();
        assert!(fit.beta.norm() < 1e-10);
        let edf = fact.edf_per_column(&ne, &[1e12]);
        assert!(edf.iter().all(|&e| e.abs() < 1e-9));
    }

    #[test]
    fn normal_equations_residual_is_small() {
        let x = DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) as f64 * 0.61).sin());
        let y: Vec<f64> = (0..30).map(|i| (i as f64 * 0.17).cos()).collect();
        let design = dense_design(x.clone(), y, ridge_penalty(4));
        let ne = NormalEquations::build(&design);
        let (fit, _) = pls_solve(&design, &ne, &[0.37]).unwrap();
        let xty = design.xtv(&design.y);
        let resid = &xty
            - (x.transpose() * &x) * &fit.beta
            - 0.37 * &fit.beta;
        let scale = xty.amax();
        assert!(resid.amax() < 1e-10 * scale, "residual {}", resid.amax());
    }

    fn small_model() -> (Design, NormalEquations) {
        let spec = SynthSpec::hmd_like(&["AUT", "CZE"], 1995, 6, 12);
        let panel = synth_panel(&spec, 11).unwrap();
        let cov = compute_covariates(&panel, 6).unwrap();
        let frame = attach_covariates(&panel, &cov).unwrap();
        let terms = ModelTerms::build(&frame, &ModelSpec::multi_population(5, 4, 0.1)).unwrap();
        let design = terms.design(&frame, false).unwrap();
        let ne = NormalEquations::build(&design);
        (design, ne)
    }

    #[test]
    fn block_arrow_matches_dense_reference() {
        let (design, ne) = small_model();
        let mut lambdas = vec![0.0; design.n_lambdas];
        for (i, l) in lambdas.iter_mut().enumerate() {
            *l = (0.3 + 0.17 * (i % 7) as f64) * 10f64.powi((i % 3) as i32 - 1);
        }
        let (fit, fact) = pls_solve(&design, &ne, &lambdas).unwrap();
        let dense = dense_pls(&design.to_dense(), &design.y, &design.dense_penalty(&lambdas))
            .expect("dense reference");
        assert_relative_eq!(
            (&fit.beta - &dense.beta).amax(),
            0.0,
            epsilon = 1e-8 * dense.beta.amax().max(1.0)
        );
        assert_relative_eq!(fit.logdet_f, dense.logdet_f, epsilon = 1e-8);
        assert_relative_eq!(fit.rss, dense.rss, epsilon = 1e-8 * dense.rss);
        let h = fact.hat_diagonal(&design, &ne);
        for (a, b) in h.iter().zip(&dense.hat_diag) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        let edf = fact.edf_per_column(&ne, &lambdas);
        for (a, b) in edf.iter().zip(&dense.edf_per_col) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        // Trace identity: sum of leverages equals total edf.
        let sum_h: f64 = h.iter().sum();
        let sum_edf: f64 = edf.iter().sum();
        assert_relative_eq!(sum_h, sum_edf, epsilon = 1e-6);
    }

    #[test]
    fn leverages_lie_in_unit_interval() {
        let (design, ne) = small_model();
        let lambdas = vec![1.0; design.n_lambdas];
        let (_, fact) = pls_solve(&design, &ne, &lambdas).unwrap();
        for h in fact.hat_diagonal(&design, &ne) {
            assert!(h > -1e-12 && h < 1.0 + 1e-12, "leverage {h}");
        }
    }

    #[test]
    fn perturbed_solve_matches_full_factorization() {
        let (design, ne) = small_model();
        let lambdas = vec![0.8; design.n_lambdas];
        let base = ne.base_factor(&lambdas).unwrap();
        let full = ne.factorize(&lambdas).unwrap();
        assert_relative_eq!(base.logdet, full.logdet, epsilon = 1e-9);
        assert_relative_eq!(
            (base.beta(&ne) - full.beta(&ne)).amax(),
            0.0,
            epsilon = 1e-9
        );
        for i in [0usize, 1, design.n_lambdas / 2, design.n_lambdas - 1] {
            let mut l2 = lambdas.clone();
            l2[i] *= 4.0;
            let (ld, beta) = ne.solve_perturbed(&base, &l2).unwrap();
            let fact = ne.factorize(&l2).unwrap();
            assert_relative_eq!(ld, fact.logdet, epsilon = 1e-8);
            assert_relative_eq!((beta - fact.beta(&ne)).amax(), 0.0, epsilon = 1e-8);
        }
        // Several coordinates at once still agree (may take the full path).
        let l3: Vec<f64> = (0..design.n_lambdas)
            .map(|i| if i % 3 == 0 { 2.5 } else { 0.8 })
            .collect();
        let (ld, beta) = ne.solve_perturbed(&base, &l3).unwrap();
        let fact = ne.factorize(&l3).unwrap();
        assert_relative_eq!(ld, fact.logdet, epsilon = 1e-8);
        assert_relative_eq!((beta - fact.beta(&ne)).amax(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn lambda_count_is_checked() {
        let (design, ne) = small_model();
        match ne.factorize(&vec![1.0; design.n_lambdas + 1]) {
            Err(SolverError::LambdaCount { .. }) => {}
            other => panic!("expected lambda-count error, got {:?}", other.map(|_| ())),
        }
    }
}
