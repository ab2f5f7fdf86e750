//! Hierarchical likelihood-informed subspaces.
//!
//! The level-`l` basis is block upper-triangular: the columns inherited from
//! level `l - 1` are zero on the new coefficients, and each enrichment block
//! `[Z_c; Z_f]` is stored once. Applying the basis therefore costs
//! `sum_j R_j s_j` rather than `R_l r_l`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::lanczos::{lanczos_eigs, EigenPairs, LanczosOptions, SymmetricOperator, Target};
use crate::model::Linearization;

/// Columns added at one level, split into rows shared with the previous
/// level (`coarse`) and rows that are new (`fine`).
#[derive(Debug, Clone, PartialEq)]
pub struct LisBlock {
    pub coarse: DMatrix<f64>,
    pub fine: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl LisBlock {
    pub fn rank(&self) -> usize {
        self.fine.ncols()
    }
}

/// Orthonormal nested bases for levels `0..num_levels()`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HierarchicalBasis {
    dims: Vec<usize>,
    blocks: Vec<LisBlock>,
}

impl HierarchicalBasis {
    pub fn new() -> Self {
        Self::default()
    }

    /// A hierarchy of zero-rank bases, which turns operator-weighted
    /// proposals into plain Crank-Nicolson ones.
    pub fn empty(dims: &[usize]) -> Self {
        let mut b = Self::new();
        for &d in dims {
            let prev = b.dims.last().copied().unwrap_or(0);
            b.dims.push(d);
            b.blocks.push(LisBlock {
                coarse: DMatrix::zeros(prev, 0),
                fine: DMatrix::zeros(d - prev, 0),
                eigenvalues: Vec::new(),
            });
        }
        b
    }

    pub fn num_levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_dim(&self, level: usize) -> usize {
        self.dims[level]
    }

    pub fn param_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn block(&self, level: usize) -> &LisBlock {
        &self.blocks[level]
    }

    /// Total rank `r_l`.
    pub fn rank(&self, level: usize) -> usize {
        self.blocks[..=level].iter().map(LisBlock::rank).sum()
    }

    /// Keeps the first `levels` levels.
    pub fn truncated(&self, levels: usize) -> Self {
        HierarchicalBasis {
            dims: self.dims[..levels].to_vec(),
            blocks: self.blocks[..levels].to_vec(),
        }
    }

    /// Appends a level from full-length columns that are orthogonal to the
    /// lifted basis of the previous level.
    pub fn push_level(&mut self, dim: usize, vectors: &DMatrix<f64>, eigenvalues: Vec<f64>) -> Result<()> {
        let prev = self.dims.last().copied().unwrap_or(0);
        if dim <= prev && !self.dims.is_empty() {
            return Err(Error::Usage(format!(
                "level dimension {dim} must exceed the previous {prev}"
            )));
        }
        check_dim("enrichment rows", dim, vectors.nrows())?;
        check_dim("enrichment eigenvalues", vectors.ncols(), eigenvalues.len())?;
        let s = vectors.ncols();
        self.dims.push(dim);
        self.blocks.push(LisBlock {
            coarse: vectors.view((0, 0), (prev, s)).clone_owned(),
            fine: vectors.view((prev, 0), (dim - prev, s)).clone_owned(),
            eigenvalues,
        });
        Ok(())
    }

    /// `Psi_l w`.
    pub fn apply(&self, level: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_level(level)?;
        check_dim("basis coefficients", self.rank(level), w.len())?;
        let mut flops = 0;
        Ok(self.apply_counted(level, w, &mut flops))
    }

    /// `Psi_l w` together with the number of multiply-adds performed.
    pub fn apply_with_flops(&self, level: usize, w: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        self.check_level(level)?;
        check_dim("basis coefficients", self.rank(level), w.len())?;
        let mut flops = 0;
        let x = self.apply_counted(level, w, &mut flops);
        Ok((x, flops))
    }

    fn apply_counted(&self, level: usize, w: &DVector<f64>, flops: &mut usize) -> DVector<f64> {
        let block = &self.blocks[level];
        let s = block.rank();
        let r_prev = w.len() - s;
        let new = w.rows(r_prev, s);
        let prev_dim = block.coarse.nrows();
        let mut out = DVector::zeros(self.dims[level]);
        if level > 0 {
            let mut head = self.apply_counted(level - 1, &w.rows(0, r_prev).clone_owned(), flops);
            head.gemv(1.0, &block.coarse, &new, 1.0);
            out.rows_mut(0, prev_dim).copy_from(&head);
        }
        out.rows_mut(prev_dim, block.fine.nrows()).copy_from(&(&block.fine * new));
        *flops += self.dims[level] * s;
        out
    }

    /// `Psi_l^T x`.
    pub fn apply_transpose(&self, level: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_level(level)?;
        check_dim("full-space vector", self.dims[level], x.len())?;
        Ok(self.apply_transpose_unchecked(level, x))
    }

    fn apply_transpose_unchecked(&self, level: usize, x: &DVector<f64>) -> DVector<f64> {
        let block = &self.blocks[level];
        let prev_dim = block.coarse.nrows();
        let head = x.rows(0, prev_dim);
        let mut new = block.fine.tr_mul(&x.rows(prev_dim, block.fine.nrows()));
        if prev_dim > 0 {
            new += block.coarse.tr_mul(&head);
        }
        if level == 0 {
            return new;
        }
        let older = self.apply_transpose_unchecked(level - 1, &head.clone_owned());
        let mut out = DVector::zeros(older.len() + new.len());
        out.rows_mut(0, older.len()).copy_from(&older);
        out.rows_mut(older.len(), new.len()).copy_from(&new);
        out
    }

    /// Orthogonal projection of a level-`level` vector onto the span of the basis.
    pub fn project(&self, level: usize, x: &DVector<f64>) -> DVector<f64> {
        let w = self.apply_transpose_unchecked(level, x);
        let mut flops = 0;
        self.apply_counted(level, &w, &mut flops)
    }

    /// Explicit `R_l x r_l` matrix, for tests and small problems.
    pub fn dense(&self, level: usize) -> DMatrix<f64> {
        let r = self.rank(level);
        let mut m = DMatrix::zeros(self.dims[level], r);
        let mut flops = 0;
        for j in 0..r {
            let e = DVector::from_fn(r, |i, _| (i == j) as u8 as f64);
            m.set_column(j, &self.apply_counted(level, &e, &mut flops));
        }
        m
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.blocks.len() {
            return Err(Error::Usage(format!(
                "basis has {} levels, requested level {level}",
                self.blocks.len()
            )));
        }
        Ok(())
    }
}

/// Sample average of Gauss-Newton Hessians at reference points.
pub struct AveragedGnh<L: Linearization> {
    samples: Vec<L>,
    dim: usize,
}

impl<L: Linearization> AveragedGnh<L> {
    pub fn new(samples: Vec<L>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.point().len())
            .ok_or_else(|| Error::Usage("averaged Hessian needs at least one sample".into()))?;
        for s in &samples {
            check_dim("reference sample", dim, s.point().len())?;
        }
        Ok(AveragedGnh { samples, dim })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn apply_vec(&self, dv: &DVector<f64>) -> DVector<f64> {
        let sum = self
            .samples
            .par_iter()
            .map(|s| s.gnh_apply(dv))
            .reduce(|| DVector::zeros(self.dim), |a, b| a + b);
        sum / self.samples.len() as f64
    }
}

impl<L: Linearization> SymmetricOperator for AveragedGnh<L> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(self.apply_vec(&DVector::from_column_slice(x)).as_slice());
    }
}

/// `(I - P) H (I - P)` where `P` projects onto the lifted coarse basis.
struct Deflated<'a, O: SymmetricOperator + ?Sized> {
    inner: &'a O,
    basis: &'a HierarchicalBasis,
    coarse_level: usize,
}

impl<O: SymmetricOperator + ?Sized> Deflated<'_, O> {
    fn remove_lifted(&self, x: &mut [f64]) {
        let k = self.basis.param_dim(self.coarse_level);
        let head = DVector::from_column_slice(&x[..k]);
        let p = self.basis.project(self.coarse_level, &head);
        for (xi, pi) in x[..k].iter_mut().zip(p.iter()) {
            *xi -= pi;
        }
    }
}

impl<O: SymmetricOperator + ?Sized> SymmetricOperator for Deflated<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut z = x.to_vec();
        self.remove_lifted(&mut z);
        self.inner.apply(&z, y);
        self.remove_lifted(y);
    }
    fn restrict_start(&self, x: &mut [f64]) {
        self.remove_lifted(x);
    }
}

#[derive(Debug, Clone)]
pub struct LisOptions {
    pub threshold: f64,
    pub max_rank: usize,
    pub lanczos: LanczosOptions,
}

impl LisOptions {
    pub fn new(threshold: f64, max_rank: usize) -> Self {
        LisOptions {
            threshold,
            max_rank,
            lanczos: LanczosOptions::default(),
        }
    }
}

/// Leading eigenpairs above the threshold of a level-0 operator.
pub fn build_base_lis<O: SymmetricOperator + ?Sized>(op: &O, opts: &LisOptions) -> Result<EigenPairs> {
    if !(opts.threshold > 0.0) {
        return Err(Error::Usage(format!("truncation threshold must be positive, got {}", opts.threshold)));
    }
    let pairs = lanczos_eigs(
        op,
        Target::AboveThreshold {
            threshold: opts.threshold,
            max_count: opts.max_rank.min(op.dim()),
        },
        &lanczos_with_cap(opts),
    )?;
    if pairs.is_empty() {
        log::warn!("no eigenvalue exceeds the truncation threshold {}; basis is empty", opts.threshold);
    }
    Ok(pairs)
}

fn lanczos_with_cap(opts: &LisOptions) -> LanczosOptions {
    let mut l = opts.lanczos.clone();
    if l.max_subspace.is_none() {
        l.max_subspace = Some(4 * opts.max_rank.max(10) + 20);
    }
    l
}

/// New directions at level `basis.num_levels()` for an operator on that
/// level's parameter space: eigenpairs of the operator deflated by the
/// lifted basis, re-orthogonalised against it.
pub fn enrich<O: SymmetricOperator + ?Sized>(
    basis: &HierarchicalBasis,
    op: &O,
    opts: &LisOptions,
) -> Result<EigenPairs> {
    if basis.num_levels() == 0 {
        return build_base_lis(op, opts);
    }
    let coarse_level = basis.num_levels() - 1;
    let coarse_dim = basis.param_dim(coarse_level);
    if op.dim() <= coarse_dim {
        return Err(Error::Dimension {
            context: "enrichment operator",
            expected: coarse_dim + 1,
            got: op.dim(),
        });
    }
    let deflated = Deflated {
        inner: op,
        basis,
        coarse_level,
    };
    let free = op.dim() - basis.rank(coarse_level);
    let mut pairs = build_base_lis(
        &deflated,
        &LisOptions {
            max_rank: opts.max_rank.min(free),
            ..opts.clone()
        },
    )?;
    for _ in 0..2 {
        for k in 0..pairs.len() {
            let mut col = pairs.vectors.column(k).clone_owned();
            deflated.remove_lifted(col.as_mut_slice());
            for j in 0..k {
                let prev = pairs.vectors.column(j).clone_owned();
                col.axpy(-prev.dot(&col), &prev, 1.0);
            }
            let n = col.norm();
            pairs.vectors.set_column(k, &(col / n));
        }
    }
    Ok(pairs)
}

/// Inputs of the storage and construction cost comparison. Ranks are real
/// so synthetic sequences need not be integral.
#[derive(Debug, Clone)]
pub struct CostInputs {
    pub param_dims: Vec<f64>,
    pub block_ranks: Vec<f64>,
    pub single_rank: f64,
    pub forward_dofs: Vec<f64>,
    pub solve_exponent: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub storage_multi: f64,
    pub storage_single: f64,
    pub build_multi: f64,
    pub build_single: f64,
    pub storage_ratio: f64,
    pub build_ratio: f64,
    pub beta_p: f64,
    pub beta_r: f64,
    pub beta_m: f64,
    /// Ratio of the single-level rank to the base rank.
    pub c_empirical: f64,
    pub storage_bound: f64,
    pub build_bound: f64,
}

/// Storage (`sum R_l s_l` against `R_L r_L`) and construction cost ratios,
/// with the closed-form geometric bounds. Growth rates are fitted so that
/// the bounds' hypotheses hold: `beta_p` and `beta_m` from the end points and
/// `beta_r` as the largest decay rate dominating every `s_l`.
pub fn cost_model(inp: &CostInputs) -> Result<CostReport> {
    let n = inp.param_dims.len();
    if n == 0 || inp.block_ranks.len() != n || inp.forward_dofs.len() != n {
        return Err(Error::Usage("cost model needs one entry per level".into()));
    }
    if inp.block_ranks[0] <= 0.0 || inp.single_rank <= 0.0 {
        return Err(Error::Usage("base and single-level ranks must be positive".into()));
    }
    let l = (n - 1) as f64;
    let storage_multi: f64 = inp.param_dims.iter().zip(&inp.block_ranks).map(|(r, s)| r * s).sum();
    let storage_single = inp.param_dims[n - 1] * inp.single_rank;
    let weight = |m: f64| m.powf(inp.solve_exponent);
    let build_multi: f64 = inp.forward_dofs.iter().zip(&inp.block_ranks).map(|(m, s)| s * weight(*m)).sum();
    let build_single = inp.single_rank * weight(inp.forward_dofs[n - 1]);
    let end_rate = |v: &[f64]| if n > 1 { (v[n - 1] / v[0]).ln() / l } else { 0.0 };
    let beta_p = end_rate(&inp.param_dims);
    let beta_m = end_rate(&inp.forward_dofs);
    let s0 = inp.block_ranks[0];
    let beta_r = inp.block_ranks[1..]
        .iter()
        .enumerate()
        .map(|(k, &s)| if s > 0.0 { (s0 / s).ln() / (k + 1) as f64 } else { f64::INFINITY })
        .fold(f64::INFINITY, f64::min);
    let c_empirical = inp.single_rank / s0;
    let bound = |growth: f64| {
        let decay = if beta_r.is_finite() { beta_r } else { 1e6 };
        let gap = (growth - decay).abs();
        let series = if gap == 0.0 {
            l + 1.0
        } else {
            (l + 1.0).min(1.0 / (1.0 - (-gap).exp()))
        };
        series * (-growth.min(decay) * l).exp() / c_empirical
    };
    Ok(CostReport {
        storage_multi,
        storage_single,
        build_multi,
        build_single,
        storage_ratio: storage_multi / storage_single,
        build_ratio: build_multi / build_single,
        beta_p,
        beta_r,
        beta_m,
        c_empirical,
        storage_bound: bound(beta_p),
        build_bound: bound(beta_m * inp.solve_exponent),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lanczos::dense_symmetric_eigs;
    use crate::rng;
    use crate::toy::LinearGaussian;
    use crate::model::LevelModel;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 0);
        DMatrix::from_fn(rows, cols, |_, _| rng::std_normal(&mut r))
    }

    fn orthonormal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        random_matrix(rows, cols, seed).qr().q()
    }

    fn sample_basis() -> HierarchicalBasis {
        let mut b = HierarchicalBasis::new();
        let q0 = orthonormal(5, 2, 1);
        b.push_level(5, &q0, vec![3.0, 1.0]).unwrap();
        let mut z = random_matrix(9, 3, 2);
        for k in 0..3 {
            let mut col = z.column(k).clone_owned();
            let head = col.rows(0, 5).clone_owned();
            let p = &q0 * q0.tr_mul(&head);
            for i in 0..5 {
                col[i] -= p[i];
            }
            for j in 0..k {
                let prev = z.column(j).clone_owned();
                col.axpy(-prev.dot(&col), &prev, 1.0);
            }
            let nrm = col.norm();
            z.set_column(k, &(col / nrm));
        }
        b.push_level(9, &z, vec![0.5, 0.3, 0.2]).unwrap();
        b
    }

    #[test]
    fn averaged_hessian_matches_dense_average() {
        let base = random_matrix(3, 4, 7);
        let points: Vec<DVector<f64>> = (0..3).map(|k| DVector::from_element(4, k as f64)).collect();
        let models: Vec<LinearGaussian> = (0..3)
            .map(|k| {
                let g = &base * (1.0 + k as f64);
                LinearGaussian::new(g, DVector::zeros(3), 0.5, DVector::zeros(4)).unwrap()
            })
            .collect();
        let lins: Vec<_> = models.iter().zip(&points).map(|(m, p)| m.linearize(p).unwrap()).collect();
        let mut dense = DMatrix::zeros(4, 4);
        for m in &models {
            dense += m.forward_matrix().tr_mul(m.forward_matrix()) / 0.25;
        }
        dense /= 3.0;
        let op = AveragedGnh::new(lins.clone()).unwrap();
        let dv = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        assert!((op.apply_vec(&dv) - &dense * &dv).amax() < 1e-10);
        assert_eq!(op.apply_vec(&DVector::zeros(4)), DVector::zeros(4));
        let single = AveragedGnh::new(vec![lins[1].clone()]).unwrap();
        assert_eq!(single.apply_vec(&dv), lins[1].gnh_apply(&dv));
    }

    #[test]
    fn base_lis_on_diagonal_operator() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 0.5, 0.001]));
        let pairs = build_base_lis(&d, &LisOptions::new(0.01, 10)).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!((pairs.vectors.clone() - DMatrix::identity(4, 3)).amax() < 1e-10);
        let none = build_base_lis(&d, &LisOptions::new(10.0, 10)).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn base_lis_matches_dense_eigensolver() {
        let g = random_matrix(30, 30, 4);
        let m = &g * g.transpose() / 30.0;
        let (vals, vecs) = dense_symmetric_eigs(&m);
        let threshold = 0.5 * (vals[5] + vals[6]);
        let pairs = build_base_lis(&m, &LisOptions::new(threshold, 30)).unwrap();
        assert_eq!(pairs.len(), 6);
        for k in 0..6 {
            assert!((pairs.values[k] - vals[k]).abs() < 1e-8 * vals[0]);
            assert!((pairs.vectors.column(k).dot(&vecs.column(k)).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn lifting_pads_with_zeros_and_preserves_norms() {
        let b = sample_basis();
        let psi = b.dense(1);
        let e1 = DVector::from_fn(5, |i, _| (i == 0) as u8 as f64);
        let mut single = HierarchicalBasis::new();
        single.push_level(5, &DMatrix::from_column_slice(5, 1, e1.as_slice()), vec![1.0]).unwrap();
        single.push_level(7, &DMatrix::zeros(7, 0), vec![]).unwrap();
        let lifted = single.dense(1);
        assert_eq!(lifted.column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = DVector::from_vec(vec![0.7, -1.3]);
        let coarse = b.apply(0, &w).unwrap();
        let mut full = DVector::zeros(5);
        full.rows_mut(0, 2).copy_from(&w);
        let lifted_w = &psi.columns(0, 2) * &w;
        assert!((lifted_w.norm() - coarse.norm()).abs() < 1e-12);
        assert!(lifted_w.rows(5, 4).amax() == 0.0);
        let gram = psi.transpose() * &psi;
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn apply_matches_dense_and_counts_flops() {
        let b = sample_basis();
        let psi = b.dense(1);
        let w = DVector::from_fn(5, |i, _| (i as f64 + 0.5).sin());
        let (x, flops) = b.apply_with_flops(1, &w).unwrap();
        assert!((x - &psi * &w).amax() < 1e-12);
        let expect = 5 * 2 + 9 * 3;
        assert!(flops >= expect / 2 && flops <= 2 * expect);
        let y = DVector::from_fn(9, |i, _| (i as f64).cos());
        assert!((b.apply_transpose(1, &y).unwrap() - psi.transpose() * &y).amax() < 1e-12);
        let e3 = DVector::from_fn(5, |i, _| (i == 3) as u8 as f64);
        assert_eq!(b.apply(1, &e3).unwrap(), psi.column(3).clone_owned());
        assert!(matches!(b.apply(1, &DVector::zeros(4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identity_block_embeds() {
        let mut b = HierarchicalBasis::new();
        b.push_level(2, &DMatrix::zeros(2, 0), vec![]).unwrap();
        let mut v = DMatrix::zeros(5, 3);
        v.view_mut((2, 0), (3, 3)).copy_from(&DMatrix::identity(3, 3));
        b.push_level(5, &v, vec![1.0; 3]).unwrap();
        let w = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(b.apply(1, &w).unwrap().as_slice(), &[0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn enrichment_matches_dense_deflated_eigensolve() {
        let (coarse, fine) = (8, 20);
        let g = random_matrix(fine, 12, 8);
        let h = &g * g.transpose() / 4.0;
        let h0 = h.view((0, 0), (coarse, coarse)).clone_owned();
        let mut basis = HierarchicalBasis::new();
        let base = build_base_lis(&h0, &LisOptions::new(0.5, 16)).unwrap();
        basis.push_level(coarse, &base.vectors, base.values.clone()).unwrap();
        let pairs = enrich(&basis, &h, &LisOptions::new(0.5, 20)).unwrap();
        let mut lifted = DMatrix::zeros(fine, base.len());
        lifted.view_mut((0, 0), (coarse, base.len())).copy_from(&base.vectors);
        let proj = DMatrix::identity(fine, fine) - &lifted * lifted.transpose();
        let (vals, vecs) = dense_symmetric_eigs(&(&proj * &h * &proj));
        let expected = vals.iter().filter(|v| **v > 0.5).count();
        assert_eq!(pairs.len(), expected);
        for k in 0..expected {
            assert!((pairs.values[k] - vals[k]).abs() < 1e-8 * vals[0]);
            assert!((pairs.vectors.column(k).dot(&vecs.column(k)).abs() - 1.0).abs() < 1e-8);
        }
        basis.push_level(fine, &pairs.vectors, pairs.values.clone()).unwrap();
        let psi = basis.dense(1);
        let gram = psi.transpose() * &psi;
        assert!((gram - DMatrix::identity(psi.ncols(), psi.ncols())).amax() < 1e-10);
    }

    #[test]
    fn enrichment_of_contained_operator_is_empty() {
        let q = orthonormal(6, 2, 3);
        let h0 = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 2.0])) * q.transpose();
        let mut basis = HierarchicalBasis::new();
        let base = build_base_lis(&h0, &LisOptions::new(0.1, 6)).unwrap();
        basis.push_level(6, &base.vectors, base.values.clone()).unwrap();
        let mut h1 = DMatrix::zeros(9, 9);
        h1.view_mut((0, 0), (6, 6)).copy_from(&h0);
        let pairs = enrich(&basis, &h1, &LisOptions::new(0.1, 9)).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn single_level_cost_ratio_is_one() {
        let r = cost_model(&CostInputs {
            param_dims: vec![150.0],
            block_ranks: vec![80.0],
            single_rank: 80.0,
            forward_dofs: vec![441.0],
            solve_exponent: 1.2,
        })
        .unwrap();
        assert!((r.storage_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn storage_ratio_from_direct_summation() {
        let r = cost_model(&CostInputs {
            param_dims: vec![150.0, 250.0],
            block_ranks: vec![80.0, 21.0],
            single_rank: 91.0,
            forward_dofs: vec![441.0, 1681.0],
            solve_exponent: 1.0,
        })
        .unwrap();
        assert!((r.storage_ratio - (150.0 * 80.0 + 250.0 * 21.0) / (250.0 * 91.0)).abs() < 1e-15);
        assert!((r.build_ratio - (441.0 * 80.0 + 1681.0 * 21.0) / (1681.0 * 91.0)).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn storage_ratio_respects_geometric_bound(
            beta_p in 0.05f64..1.5,
            beta_r in 0.0f64..1.5,
            levels in 1usize..7,
            c in 0.5f64..3.0,
        ) {
            let r0 = 150.0;
            let s0 = 80.0;
            let dims: Vec<f64> = (0..=levels).map(|l| r0 * (beta_p * l as f64).exp()).collect();
            let ranks: Vec<f64> = (0..=levels).map(|l| s0 * (-beta_r * l as f64).exp()).collect();
            let report = cost_model(&CostInputs {
                param_dims: dims.clone(),
                block_ranks: ranks,
                single_rank: c * s0,
                forward_dofs: dims,
                solve_exponent: 1.0,
            }).unwrap();
            prop_assert!(report.storage_ratio <= report.storage_bound * (1.0 + 1e-12));
            prop_assert!(report.build_ratio <= report.build_bound * (1.0 + 1e-12));
        }
    }
}
