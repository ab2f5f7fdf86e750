//! Block Lanczos with full reorthogonalisation for the leading eigenpairs of
//! a symmetric operator that is only available through matrix-vector products.
//!
//! Blocks larger than one recover eigenvalues of multiplicity up to the block
//! size, which matters for isotropic kernels on symmetric domains.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A symmetric linear map on R^n.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// Maps a start vector into the subspace the operator is restricted to.
    fn restrict_start(&self, _x: &mut [f64]) {}
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        let r = self * xv;
        y.copy_from_slice(r.as_slice());
    }
}

/// Which part of the spectrum to resolve.
#[derive(Debug, Clone, Copy)]
pub enum Target {
    /// The `k` largest eigenvalues.
    Leading(usize),
    /// All eigenvalues above `threshold`, at most `max_count` of them.
    AboveThreshold { threshold: f64, max_count: usize },
}

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    pub block_size: usize,
    /// Ritz pairs are accepted when the residual is below `rel_tol * |theta|`.
    pub rel_tol: f64,
    pub max_subspace: Option<usize>,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            block_size: 1,
            rel_tol: 1e-8,
            max_subspace: None,
            seed: 0x5eed,
        }
    }
}

/// Eigenpairs sorted by decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub vectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub matvecs: usize,
}

impl EigenPairs {
    pub fn empty(n: usize) -> Self {
        EigenPairs {
            values: Vec::new(),
            vectors: DMatrix::zeros(n, 0),
            residuals: Vec::new(),
            matvecs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct Krylov<'a, O: SymmetricOperator + ?Sized> {
    op: &'a O,
    n: usize,
    basis: DMatrix<f64>,
    coeffs: DMatrix<f64>,
    len: usize,
    processed: usize,
    rng: ChaCha8Rng,
    matvecs: usize,
}

impl<'a, O: SymmetricOperator + ?Sized> Krylov<'a, O> {
    /// Orthogonalises `w` against the first `upto` basis vectors twice and
    /// returns the accumulated projection coefficients.
    fn orthogonalize(&self, w: &mut DVector<f64>, upto: usize) -> DVector<f64> {
        let mut total = DVector::zeros(upto);
        if upto == 0 {
            return total;
        }
        let q = self.basis.columns(0, upto);
        for _ in 0..2 {
            let c = q.tr_mul(w);
            w.gemv(-1.0, &q, &c, 1.0);
            total += c;
        }
        total
    }

    /// Appends a random vector orthogonal to the current basis. Returns false
    /// when the restricted space is exhausted.
    fn push_random(&mut self) -> bool {
        for _ in 0..8 {
            let mut x: Vec<f64> = (0..self.n).map(|_| crate::rng::std_normal(&mut self.rng)).collect();
            self.op.restrict_start(&mut x);
            let mut w = DVector::from_vec(x);
            let before = w.norm();
            if before == 0.0 {
                continue;
            }
            self.orthogonalize(&mut w, self.len);
            let after = w.norm();
            if after > 1e-8 * before {
                w /= after;
                self.basis.set_column(self.len, &w);
                self.len += 1;
                return true;
            }
        }
        false
    }

    /// Applies the operator to the pending block and extends the basis.
    fn step(&mut self, block: usize, capacity: usize) {
        let start = self.processed;
        let end = self.len;
        let mut images = Vec::with_capacity(end - start);
        for j in start..end {
            let mut y = vec![0.0; self.n];
            self.op.apply(self.basis.column(j).as_slice(), &mut y);
            self.matvecs += 1;
            images.push(DVector::from_vec(y));
        }
        let base = self.len;
        for (t, mut w) in images.into_iter().enumerate() {
            let j = start + t;
            let scale = w.norm();
            let c = self.orthogonalize(&mut w, self.len);
            for (i, v) in c.iter().enumerate() {
                self.coeffs[(i, j)] = *v;
            }
            let rest = w.norm();
            if rest > 1e-10 * scale.max(f64::MIN_POSITIVE) && self.len < capacity {
                w /= rest;
                self.basis.set_column(self.len, &w);
                self.coeffs[(self.len, j)] = rest;
                self.len += 1;
            }
        }
        self.processed = end;
        let added = self.len - base;
        if added < block && self.len < capacity {
            for _ in added..block {
                if self.len >= capacity || !self.push_random() {
                    break;
                }
            }
        }
    }

    fn ritz(&self) -> (Vec<f64>, DMatrix<f64>, Vec<f64>) {
        let p = self.processed;
        let h = self.coeffs.view((0, 0), (p, p));
        let t = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vecs = DMatrix::zeros(p, p);
        for (k, &i) in order.iter().enumerate() {
            vecs.set_column(k, &eig.eigenvectors.column(i));
        }
        let tail = self.len - p;
        let residuals = if tail == 0 {
            vec![0.0; p]
        } else {
            let couple = self.coeffs.view((p, 0), (tail, p));
            let r = couple * &vecs;
            (0..p).map(|k| r.column(k).norm()).collect()
        };
        (values, vecs, residuals)
    }
}

/// Computes the requested eigenpairs of `op`.
pub fn lanczos_eigs<O: SymmetricOperator + ?Sized>(
    op: &O,
    target: Target,
    opts: &LanczosOptions,
) -> Result<EigenPairs> {
    let n = op.dim();
    if n == 0 {
        return Ok(EigenPairs::empty(0));
    }
    let block = opts.block_size.clamp(1, n);
    let wanted = match target {
        Target::Leading(k) => k.min(n),
        Target::AboveThreshold { max_count, .. } => max_count.min(n),
    };
    if wanted == 0 {
        return Ok(EigenPairs::empty(n));
    }
    let capacity = opts
        .max_subspace
        .unwrap_or(match target {
            Target::Leading(k) => 2 * k + 40 + 4 * block,
            Target::AboveThreshold { max_count, .. } => 4 * max_count + 40 + 4 * block,
        })
        .clamp(wanted.min(n), n);
    let mut kr = Krylov {
        op,
        n,
        basis: DMatrix::zeros(n, capacity),
        coeffs: DMatrix::zeros(capacity, capacity),
        len: 0,
        processed: 0,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        matvecs: 0,
    };
    for _ in 0..block {
        if !kr.push_random() {
            break;
        }
    }
    let stride = (wanted / 5).max(2 * block).max(10);
    let mut next_check = match target {
        Target::Leading(k) => (k + (k / 2).max(2 * block).max(10)).min(n),
        Target::AboveThreshold { .. } => stride.min(n),
    };
    let mut worst: f64;
    let mut last_residuals: Vec<f64>;
    loop {
        let exhausted = kr.processed == kr.len;
        if !exhausted {
            kr.step(block, capacity);
        }
        let done_building = kr.processed == kr.len || kr.processed >= capacity;
        if kr.processed < next_check && !done_building {
            continue;
        }
        next_check = kr.processed + stride;
        let (values, vecs, residuals) = kr.ritz();
        let scale = values.first().map(|v| v.abs()).unwrap_or(0.0).max(f64::MIN_POSITIVE);
        let ok = |i: usize| residuals[i] <= opts.rel_tol * values[i].abs().max(1e-12 * scale);
        let p = values.len();
        let (count, converged) = match target {
            Target::Leading(k) => {
                let k = k.min(n);
                (k, p >= k && (0..k).all(ok))
            }
            Target::AboveThreshold {
                threshold,
                max_count,
            } => {
                let c = values
                    .iter()
                    .take_while(|&&v| v > threshold)
                    .count()
                    .min(max_count);
                let leading_ok = (0..c).all(ok);
                let tail_ok = c == max_count
                    || c == p && done_building
                    || c < p
                        && values[c] + residuals[c] < threshold
                        && residuals[c] <= (0.01 * threshold.abs()).max(opts.rel_tol * values[c].abs());
                (c, leading_ok && tail_ok)
            }
        };
        worst = (0..count.min(p)).map(|i| residuals[i]).fold(0.0, f64::max);
        last_residuals = residuals.clone();
        if converged {
            let sel = vecs.columns(0, count);
            let mut vectors = kr.basis.columns(0, kr.processed) * sel;
            for k in 0..count {
                let mut col = vectors.column_mut(k);
                let norm = col.norm();
                col /= norm;
                fix_sign(col.as_mut_slice());
            }
            return Ok(EigenPairs {
                values: values[..count].to_vec(),
                vectors,
                residuals: residuals[..count].to_vec(),
                matvecs: kr.matvecs,
            });
        }
        if done_building {
            return Err(Error::EigenNonConvergence {
                iterations: kr.matvecs,
                worst_residual: worst,
                residuals: last_residuals,
            });
        }
    }
}

/// Flips the vector so that its first non-negligible component is positive.
pub fn fix_sign(x: &mut [f64]) {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(first) = x.iter().find(|v| v.abs() > 1e-8 * max) {
        if *first < 0.0 {
            x.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Dense symmetric eigendecomposition sorted by decreasing eigenvalue, with
/// the sign convention of [`fix_sign`] applied.
pub fn dense_symmetric_eigs(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    if m.nrows() == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        fix_sign(col.as_mut_slice());
        vecs.set_column(k, &col);
    }
    (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| crate::rng::std_normal(&mut rng));
        &g * g.transpose() / n as f64
    }

    #[test]
    fn diagonal_threshold_recovers_expected_pairs() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 4.0, 0.001, 2.0]));
        let pairs = lanczos_eigs(
            &d,
            Target::AboveThreshold {
                threshold: 0.01,
                max_count: 8,
            },
            &LanczosOptions::default(),
        )
        .unwrap();
        assert_eq!(pairs.len(), 3);
        for (v, e) in pairs.values.iter().zip([4.0, 2.0, 0.5]) {
            assert!((v - e).abs() < 1e-12);
        }
        for (k, axis) in [1usize, 3, 0].into_iter().enumerate() {
            assert!((pairs.vectors[(axis, k)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn leading_pairs_match_dense_eigensolver() {
        let m = random_spd(30, 3);
        let (dense_vals, dense_vecs) = dense_symmetric_eigs(&m);
        let pairs = lanczos_eigs(&m, Target::Leading(6), &LanczosOptions::default()).unwrap();
        for k in 0..6 {
            assert!((pairs.values[k] - dense_vals[k]).abs() < 1e-10 * dense_vals[0]);
            let dot = pairs.vectors.column(k).dot(&dense_vecs.column(k)).abs();
            assert!((dot - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn block_size_resolves_repeated_eigenvalues() {
        let mut diag = vec![3.0, 3.0, 3.0, 1.0, 1.0];
        diag.extend((0..20).map(|i| 0.5 / (i + 1) as f64));
        let d = DMatrix::from_diagonal(&DVector::from_vec(diag));
        let opts = LanczosOptions {
            block_size: 4,
            ..Default::default()
        };
        let pairs = lanczos_eigs(&d, Target::Leading(5), &opts).unwrap();
        let expect = [3.0, 3.0, 3.0, 1.0, 1.0];
        for k in 0..5 {
            assert!((pairs.values[k] - expect[k]).abs() < 1e-10, "{:?}", pairs.values);
        }
    }

    #[test]
    fn rank_deficient_operator_stops_at_zero_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DMatrix::from_fn(40, 3, |_, _| crate::rng::std_normal(&mut rng));
        let m = &g * g.transpose();
        let pairs = lanczos_eigs(
            &m,
            Target::AboveThreshold {
                threshold: 1e-6,
                max_count: 40,
            },
            &LanczosOptions::default(),
        )
        .unwrap();
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let m = random_spd(50, 11);
        let opts = LanczosOptions {
            block_size: 3,
            ..Default::default()
        };
        let pairs = lanczos_eigs(&m, Target::Leading(12), &opts).unwrap();
        let gram = pairs.vectors.transpose() * &pairs.vectors;
        let err = (gram - DMatrix::identity(12, 12)).abs().max();
        assert!(err < 1e-10, "{err}");
    }
}
