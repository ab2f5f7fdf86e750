//! Sparse symmetric positive-definite factorisation.
//!
//! Matrices are stored as the upper triangle in compressed-column form. The
//! symbolic analysis (elimination tree and column counts) depends only on the
//! sparsity pattern and is shared between numeric factorisations, which is what
//! makes repeated forward solves on a fixed mesh cheap.

use std::sync::Arc;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Upper triangle (row <= col) of a symmetric matrix in CSC layout.
#[derive(Debug, Clone)]
pub struct UpperCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl UpperCsc {
    /// Builds the pattern from (row, col) pairs; duplicates collapse and
    /// lower-triangle pairs are mirrored. Values start at zero.
    pub fn from_pattern(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in entries {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let nnz = row_idx.len();
        UpperCsc {
            n,
            col_ptr,
            row_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Position of entry (row, col) in `values`, accepting either triangle.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        self.row_idx[lo..hi].binary_search(&r).ok().map(|k| lo + k)
    }

    /// y = A x using the symmetric structure.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }
}

/// Elimination tree and column pointers of the Cholesky factor.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyse(a: &UpperCsc) -> Arc<Self> {
        let n = a.n;
        let parent = elimination_tree(a);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = row_pattern(a, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        l_col_ptr.push(0);
        for c in counts {
            let last = *l_col_ptr.last().unwrap();
            l_col_ptr.push(last + c);
        }
        Arc::new(SymbolicCholesky {
            n,
            parent,
            l_col_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }
}

/// Numeric lower-triangular factor L with A = L L^T. The diagonal entry is
/// stored first in each column.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    /// Up-looking factorisation of `a`, whose pattern must match the one used
    /// to build `symbolic`.
    pub fn factorize(symbolic: &Arc<SymbolicCholesky>, a: &UpperCsc) -> Result<Self> {
        let n = symbolic.n;
        if a.n != n {
            return Err(Error::Dimension {
                context: "sparse factorisation",
                expected: n,
                got: a.n,
            });
        }
        let nnz = symbolic.factor_nnz();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next: Vec<usize> = symbolic.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = row_pattern(a, k, &symbolic.parent, &mut stack, &mut mark);
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                x[a.row_idx[p]] = a.values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let start = symbolic.l_col_ptr[i];
                let lki = x[i] / values[start];
                x[i] = 0.0;
                for p in start + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k;
                values[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {k} of {n} is {d:.3e}"
                )));
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = d.sqrt();
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(symbolic),
            row_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// Overwrites `b` with A^{-1} b.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let lp = &self.symbolic.l_col_ptr;
        let n = self.symbolic.n;
        assert_eq!(b.len(), n, "right-hand side length");
        for j in 0..n {
            let start = lp[j];
            b[j] /= self.values[start];
            let bj = b[j];
            for p in start + 1..lp[j + 1] {
                b[self.row_idx[p]] -= self.values[p] * bj;
            }
        }
        for j in (0..n).rev() {
            let start = lp[j];
            let mut s = b[j];
            for p in start + 1..lp[j + 1] {
                s -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = s / self.values[start];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

fn elimination_tree(a: &UpperCsc) -> Vec<usize> {
    let n = a.n;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = a.row_idx[p];
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row k of L (excluding the diagonal) in topological
/// order, returned as `stack[top..]`.
fn row_pattern(
    a: &UpperCsc,
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = k;
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.row_idx[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Nested-dissection elimination order for an `nx` by `ny` structured grid
/// whose nodes couple to their eight neighbours. Returns, for each grid index
/// `i + nx * j`, its position in the elimination order.
pub fn grid_nested_dissection(nx: usize, ny: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(nx * ny);
    dissect(0, nx, 0, ny, nx, &mut order);
    let mut position = vec![0; nx * ny];
    for (pos, &node) in order.iter().enumerate() {
        position[node] = pos;
    }
    position
}

fn dissect(x0: usize, x1: usize, y0: usize, y1: usize, nx: usize, order: &mut Vec<usize>) {
    let w = x1 - x0;
    let h = y1 - y0;
    if w == 0 || h == 0 {
        return;
    }
    if w * h <= 16 || w < 3 && h < 3 {
        for j in y0..y1 {
            for i in x0..x1 {
                order.push(i + nx * j);
            }
        }
        return;
    }
    if w >= h {
        let mid = x0 + w / 2;
        dissect(x0, mid, y0, y1, nx, order);
        dissect(mid + 1, x1, y0, y1, nx, order);
        for j in y0..y1 {
            order.push(mid + nx * j);
        }
    } else {
        let mid = y0 + h / 2;
        dissect(x0, x1, y0, mid, nx, order);
        dissect(x0, x1, mid + 1, y1, nx, order);
        for i in x0..x1 {
            order.push(i + nx * mid);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn grid_laplacian(nx: usize, ny: usize, perm: &[usize]) -> UpperCsc {
        let idx = |i: usize, j: usize| perm[i + nx * j];
        let mut entries = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                            entries.push((idx(i, j), idx(ii as usize, jj as usize)));
                        }
                    }
                }
            }
        }
        let mut a = UpperCsc::from_pattern(nx * ny, entries);
        for j in 0..ny {
            for i in 0..nx {
                let p = a.position(idx(i, j), idx(i, j)).unwrap();
                a.values[p] = 8.5;
                for (di, dj) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                        let p = a.position(idx(i, j), idx(ii as usize, jj as usize)).unwrap();
                        a.values[p] = -1.0 - 0.01 * (i + j) as f64;
                    }
                }
            }
        }
        a
    }

    fn to_dense(a: &UpperCsc) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.n, a.n);
        for c in 0..a.n {
            for p in a.col_ptr[c]..a.col_ptr[c + 1] {
                m[(a.row_idx[p], c)] = a.values[p];
                m[(c, a.row_idx[p])] = a.values[p];
            }
        }
        m
    }

    #[test]
    fn nested_dissection_is_a_permutation() {
        let perm = grid_nested_dissection(13, 9);
        let mut seen = perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..13 * 9).collect::<Vec<_>>());
    }

    #[test]
    fn sparse_solve_matches_dense_lu() {
        for (nx, ny) in [(1, 1), (3, 2), (7, 9), (12, 5)] {
            let perm = grid_nested_dissection(nx, ny);
            let a = grid_laplacian(nx, ny, &perm);
            let sym = SymbolicCholesky::analyse(&a);
            let f = CholeskyFactor::factorize(&sym, &a).unwrap();
            let b: Vec<f64> = (0..a.n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            let dense = to_dense(&a).lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for i in 0..a.n {
                assert!((x[i] - dense[i]).abs() < 1e-12, "{nx}x{ny} entry {i}");
            }
            let r = a.mul_vec(&x);
            for i in 0..a.n {
                assert!((r[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = UpperCsc::from_pattern(2, [(0, 0), (0, 1), (1, 1)]);
        a.values.copy_from_slice(&[1.0, 2.0, 1.0]);
        let sym = SymbolicCholesky::analyse(&a);
        assert!(matches!(
            CholeskyFactor::factorize(&sym, &a),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn nested_dissection_limits_fill() {
        let (nx, ny) = (40, 42);
        let natural: Vec<usize> = (0..nx * ny).collect();
        let nd = grid_nested_dissection(nx, ny);
        let fill_nat = SymbolicCholesky::analyse(&grid_laplacian(nx, ny, &natural)).factor_nnz();
        let fill_nd = SymbolicCholesky::analyse(&grid_laplacian(nx, ny, &nd)).factor_nnz();
        assert!(fill_nd < fill_nat, "nd {fill_nd} natural {fill_nat}");
    }
}
