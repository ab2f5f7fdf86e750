//! Gaussian random-field prior represented by a truncated Karhunen-Loeve
//! expansion on the unit square.
//!
//! The field is `u = sum_j sqrt(w_j) phi_j v_j` with whitened coefficients
//! `v ~ N(0, I)`. Eigenpairs come from the trapezoidal Nystrom discretisation
//! of the covariance operator on the finest grid. Coarser levels reuse the
//! same eigenfunctions sampled at their (nested) nodes, so a level-`l` field
//! is exactly the restriction of the level-`l+1` field with zero-padded
//! coefficients.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lanczos::{dense_symmetric_eigs, lanczos_eigs, LanczosOptions, SymmetricOperator, Target};

/// Grids with at most this many nodes are decomposed densely.
const DENSE_NODE_LIMIT: usize = 1200;

/// Exponential covariance `variance * exp(-correlation_rate * |x - x'|)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub kind: String,
    pub correlation_rate: f64,
    pub variance: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: "exponential".into(),
            correlation_rate: 5.0,
            variance: 1.0,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kind != "exponential" {
            out.push(format!("kernel.kind '{}' is not supported (only 'exponential')", self.kind));
        }
        if !(self.correlation_rate > 0.0 && self.correlation_rate.is_finite()) {
            out.push(format!("kernel.correlation_rate must be positive, got {}", self.correlation_rate));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            out.push(format!("kernel.variance must be positive, got {}", self.variance));
        }
        out
    }

    pub fn eval(&self, distance: f64) -> f64 {
        self.variance * (-self.correlation_rate * distance).exp()
    }
}

/// Dense covariance matrix between the given points.
pub fn kernel_gram(points: &[[f64; 2]], spec: &KernelSpec) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        let dx = points[i][0] - points[j][0];
        let dy = points[i][1] - points[j][1];
        spec.eval((dx * dx + dy * dy).sqrt())
    })
}

/// Node coordinates of the uniform grid with `cells` cells per side, ordered
/// with the x index fastest.
pub fn grid_nodes(cells: usize) -> Vec<[f64; 2]> {
    let h = 1.0 / cells as f64;
    let n = cells + 1;
    (0..n * n).map(|k| [(k % n) as f64 * h, (k / n) as f64 * h]).collect()
}

/// Tensor-product trapezoidal weights; they sum to one.
pub fn trapezoid_weights(cells: usize) -> Vec<f64> {
    let h = 1.0 / cells as f64;
    let n = cells + 1;
    let w1 = |i: usize| if i == 0 || i == cells { 0.5 * h } else { h };
    (0..n * n).map(|k| w1(k % n) * w1(k / n)).collect()
}

/// Truncated eigen-expansion sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct KlBasis {
    cells: usize,
    eigenvalues: Vec<f64>,
    /// Eigenfunction values at the grid nodes, one column per mode.
    eigenfunctions: DMatrix<f64>,
    /// Columns scaled by the square root of their eigenvalue.
    scaled: Arc<DMatrix<f64>>,
    degenerate_pairs: usize,
}

impl KlBasis {
    fn from_parts(cells: usize, eigenvalues: Vec<f64>, eigenfunctions: DMatrix<f64>) -> Self {
        let mut scaled = eigenfunctions.clone();
        for (j, w) in eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(w.max(0.0).sqrt());
        }
        let scale = eigenvalues.first().copied().unwrap_or(1.0).abs();
        let degenerate_pairs = eigenvalues
            .windows(2)
            .filter(|w| (w[0] - w[1]).abs() <= 1e-9 * scale)
            .count();
        KlBasis {
            cells,
            eigenvalues,
            eigenfunctions,
            scaled: Arc::new(scaled),
            degenerate_pairs,
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn num_nodes(&self) -> usize {
        (self.cells + 1) * (self.cells + 1)
    }

    pub fn num_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    /// Matrix mapping whitened coefficients to nodal field values.
    pub fn scaled_modes(&self) -> &Arc<DMatrix<f64>> {
        &self.scaled
    }

    /// Number of adjacent eigenvalue pairs that coincide to 1e-9 relative.
    pub fn degenerate_pairs(&self) -> usize {
        self.degenerate_pairs
    }

    /// Nodal values of the field for whitened coefficients `v`.
    pub fn synthesize(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        crate::error::check_dim("field synthesis", self.num_modes(), v.len())?;
        Ok(&*self.scaled * v)
    }

    /// The leading `modes` eigenfunctions sampled on a nested coarser grid.
    pub fn restrict(&self, cells: usize, modes: usize) -> Result<KlBasis> {
        if cells == 0 || self.cells % cells != 0 {
            return Err(Error::Usage(format!(
                "grid with {cells} cells is not nested in one with {}",
                self.cells
            )));
        }
        if modes > self.num_modes() {
            return Err(Error::Usage(format!(
                "requested {modes} modes but only {} are available",
                self.num_modes()
            )));
        }
        let stride = self.cells / cells;
        let fine_n = self.cells + 1;
        let n = cells + 1;
        let phi = DMatrix::from_fn(n * n, modes, |k, j| {
            let (i, jj) = (k % n, k / n);
            self.eigenfunctions[(i * stride + fine_n * jj * stride, j)]
        });
        Ok(KlBasis::from_parts(cells, self.eigenvalues[..modes].to_vec(), phi))
    }

    /// Writes the header `(level, modes, nodes)` as little-endian u64 followed
    /// by the eigenvalues and then each eigenfunction as a row of node values.
    pub fn write_binary(&self, path: &Path, level: usize) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * self.num_modes() * (1 + self.num_nodes()));
        for h in [level, self.num_modes(), self.num_nodes()] {
            buf.extend_from_slice(&(h as u64).to_le_bytes());
        }
        for w in &self.eigenvalues {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for j in 0..self.num_modes() {
            for v in self.eigenfunctions.column(j).iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a file produced by [`KlBasis::write_binary`]; returns the level too.
    pub fn read_binary(path: &Path) -> Result<(usize, KlBasis)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 24 {
            return Err(bad("truncated header".into()));
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        let (level, modes, nodes) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let side = (nodes as f64).sqrt().round() as usize;
        if side * side != nodes || side < 2 {
            return Err(bad(format!("node count {nodes} is not a square grid")));
        }
        let expected = 24 + 8 * modes * (1 + nodes);
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let float = |k: usize| f64::from_le_bytes(bytes[24 + 8 * k..32 + 8 * k].try_into().unwrap());
        let eigenvalues: Vec<f64> = (0..modes).map(float).collect();
        let phi = DMatrix::from_fn(nodes, modes, |i, j| float(modes + j * nodes + i));
        Ok((level, KlBasis::from_parts(side - 1, eigenvalues, phi)))
    }
}

/// Log-density of the whitened prior `N(0, I)`.
pub fn prior_logpdf(v: &DVector<f64>) -> f64 {
    -0.5 * v.norm_squared() - 0.5 * v.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// `W^{1/2} C W^{1/2}` on a uniform grid, applied with a circulant embedding
/// of the block-Toeplitz covariance.
struct WeightedCovariance {
    side: usize,
    embed: usize,
    sqrt_weights: Vec<f64>,
    symbol: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl WeightedCovariance {
    fn new(cells: usize, spec: &KernelSpec) -> Self {
        let side = cells + 1;
        let embed = 2 * side;
        let h = 1.0 / cells as f64;
        let wrap = |a: usize| if a <= side { a } else { embed - a };
        let mut symbol: Vec<Complex<f64>> = (0..embed * embed)
            .map(|k| {
                let (a, b) = (wrap(k % embed) as f64, wrap(k / embed) as f64);
                Complex::new(spec.eval(h * (a * a + b * b).sqrt()), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(embed);
        let inverse = planner.plan_fft_inverse(embed);
        fft2(&mut symbol, embed, &forward);
        WeightedCovariance {
            side,
            embed,
            sqrt_weights: trapezoid_weights(cells).iter().map(|w| w.sqrt()).collect(),
            symbol,
            forward,
            inverse,
        }
    }
}

fn fft2(data: &mut [Complex<f64>], n: usize, plan: &Arc<dyn Fft<f64>>) {
    for row in data.chunks_mut(n) {
        plan.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[c + n * r];
        }
        plan.process(&mut col);
        for r in 0..n {
            data[c + n * r] = col[r];
        }
    }
}

impl SymmetricOperator for WeightedCovariance {
    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (s, m) = (self.side, self.embed);
        let mut buf = vec![Complex::new(0.0, 0.0); m * m];
        for j in 0..s {
            for i in 0..s {
                let k = i + s * j;
                buf[i + m * j] = Complex::new(x[k] * self.sqrt_weights[k], 0.0);
            }
        }
        fft2(&mut buf, m, &self.forward);
        for (b, l) in buf.iter_mut().zip(&self.symbol) {
            *b *= l;
        }
        fft2(&mut buf, m, &self.inverse);
        let norm = 1.0 / (m * m) as f64;
        for j in 0..s {
            for i in 0..s {
                let k = i + s * j;
                y[k] = buf[i + m * j].re * norm * self.sqrt_weights[k];
            }
        }
    }
}

/// Options for [`kl_decompose`].
#[derive(Debug, Clone)]
pub struct KlOptions {
    pub rel_tol: f64,
    pub block_size: usize,
    /// Force the matrix-free path even on small grids.
    pub force_iterative: bool,
    pub seed: u64,
}

impl Default for KlOptions {
    fn default() -> Self {
        KlOptions {
            rel_tol: 1e-8,
            block_size: 4,
            force_iterative: false,
            seed: 0x6b6c,
        }
    }
}

/// Leading `modes` eigenpairs of the covariance on the grid with `cells`
/// cells per side, normalised so that `sum_k w_k phi_i phi_j = delta_ij`.
pub fn kl_decompose(cells: usize, spec: &KernelSpec, modes: usize, opts: &KlOptions) -> Result<KlBasis> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if cells == 0 {
        return Err(Error::Usage("grid needs at least one cell".into()));
    }
    let nodes = (cells + 1) * (cells + 1);
    if modes == 0 || modes > nodes {
        return Err(Error::Usage(format!(
            "cannot extract {modes} modes from a grid with {nodes} nodes"
        )));
    }
    let (values, vectors) = if nodes <= DENSE_NODE_LIMIT && !opts.force_iterative {
        let w: Vec<f64> = trapezoid_weights(cells).iter().map(|w| w.sqrt()).collect();
        let mut s = kernel_gram(&grid_nodes(cells), spec);
        for i in 0..nodes {
            for j in 0..nodes {
                s[(i, j)] *= w[i] * w[j];
            }
        }
        let (vals, vecs) = dense_symmetric_eigs(&s);
        (vals[..modes].to_vec(), vecs.columns(0, modes).clone_owned())
    } else {
        let op = WeightedCovariance::new(cells, spec);
        let lopts = LanczosOptions {
            block_size: opts.block_size,
            rel_tol: opts.rel_tol,
            max_subspace: Some((2 * modes + 60 + 8 * opts.block_size).min(nodes)),
            seed: opts.seed,
        };
        let pairs = lanczos_eigs(&op, Target::Leading(modes), &lopts)?;
        (pairs.values, pairs.vectors)
    };
    let inv_sqrt_w: Vec<f64> = trapezoid_weights(cells).iter().map(|w| 1.0 / w.sqrt()).collect();
    let mut phi = vectors;
    for j in 0..modes {
        for i in 0..nodes {
            phi[(i, j)] *= inv_sqrt_w[i];
        }
    }
    order_ties(&values, &mut phi);
    let basis = KlBasis::from_parts(cells, values, phi);
    if basis.degenerate_pairs > 0 {
        log::warn!(
            "{} adjacent eigenvalue pairs are degenerate; ties ordered by eigenvector components",
            basis.degenerate_pairs
        );
    }
    Ok(basis)
}

/// Within runs of equal eigenvalues, orders eigenvectors by their first
/// differing component so the output does not depend on solver internals.
fn order_ties(values: &[f64], phi: &mut DMatrix<f64>) {
    let scale = values.first().map(|v| v.abs()).unwrap_or(1.0);
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len() && (values[end - 1] - values[end]).abs() <= 1e-9 * scale {
            end += 1;
        }
        if end - start > 1 {
            let mut cols: Vec<DVector<f64>> = (start..end).map(|j| phi.column(j).clone_owned()).collect();
            cols.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .find(|(x, y)| (*x - *y).abs() > 1e-12)
                    .map(|(x, y)| y.total_cmp(x))
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (k, c) in cols.into_iter().enumerate() {
                phi.set_column(start + k, &c);
            }
        }
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted_gram(phi: &DMatrix<f64>, cells: usize) -> DMatrix<f64> {
        let w = trapezoid_weights(cells);
        let mut wp = phi.clone();
        for (i, wi) in w.iter().enumerate() {
            wp.row_mut(i).scale_mut(*wi);
        }
        phi.transpose() * wp
    }

    #[test]
    fn near_identity_kernel_recovers_quadrature_weights() {
        let spec = KernelSpec {
            correlation_rate: 1e6,
            ..Default::default()
        };
        let cells = 4;
        let basis = kl_decompose(cells, &spec, 25, &KlOptions::default()).unwrap();
        let mut w = trapezoid_weights(cells);
        w.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in basis.eigenvalues().iter().zip(&w) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn eigenfunctions_are_orthonormal_in_weighted_product() {
        let basis = kl_decompose(10, &KernelSpec::default(), 30, &KlOptions::default()).unwrap();
        let g = weighted_gram(basis.eigenfunctions(), 10);
        assert!((g - DMatrix::identity(30, 30)).abs().max() < 1e-10);
    }

    #[test]
    fn eigenvalue_sum_is_bounded_by_trace() {
        let spec = KernelSpec::default();
        let basis = kl_decompose(12, &spec, 60, &KlOptions::default()).unwrap();
        let s: f64 = basis.eigenvalues().iter().sum();
        assert!(s <= spec.variance + 1e-12);
        assert!(basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn matrix_free_path_matches_dense_path() {
        let spec = KernelSpec::default();
        let dense = kl_decompose(16, &spec, 40, &KlOptions::default()).unwrap();
        let iterative = kl_decompose(
            16,
            &spec,
            40,
            &KlOptions {
                force_iterative: true,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in dense.eigenvalues().iter().zip(iterative.eigenvalues()) {
            assert!((a - b).abs() < 1e-8 * dense.eigenvalues()[0], "{a} vs {b}");
        }
        // Compare invariant subspaces, which are well defined even for repeated eigenvalues.
        let w = trapezoid_weights(16);
        let mut wp = iterative.eigenfunctions().clone();
        for (i, wi) in w.iter().enumerate() {
            wp.row_mut(i).scale_mut(*wi);
        }
        let cross = dense.eigenfunctions().columns(0, 20).transpose() * wp.columns(0, 40);
        for k in 0..20 {
            assert!((cross.row(k).norm() - 1.0).abs() < 1e-6, "mode {k}");
        }
    }

    #[test]
    fn restriction_is_nested_injection() {
        let basis = kl_decompose(12, &KernelSpec::default(), 20, &KlOptions::default()).unwrap();
        let coarse = basis.restrict(6, 8).unwrap();
        let v = DVector::from_fn(8, |i, _| (i as f64 * 0.7).cos());
        let mut padded = DVector::zeros(20);
        padded.rows_mut(0, 8).copy_from(&v);
        let fine_field = basis.synthesize(&padded).unwrap();
        let coarse_field = coarse.synthesize(&v).unwrap();
        for j in 0..7 {
            for i in 0..7 {
                let a = coarse_field[i + 7 * j];
                let b = fine_field[2 * i + 13 * 2 * j];
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(basis.restrict(5, 8).is_err());
    }

    #[test]
    fn sampled_fields_match_truncated_covariance() {
        let cells = 4;
        let basis = kl_decompose(cells, &KernelSpec::default(), 10, &KlOptions::default()).unwrap();
        let phi = basis.scaled_modes();
        let target = &**phi * phi.transpose();
        let n = basis.num_nodes();
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acc = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let v = DVector::from_fn(10, |_, _| crate::rng::std_normal(&mut rng));
            let u = basis.synthesize(&v).unwrap();
            acc += &u * u.transpose();
        }
        acc /= draws as f64;
        for i in 0..n {
            for j in 0..n {
                let se = ((target[(i, i)] * target[(j, j)] + target[(i, j)].powi(2)) / draws as f64).sqrt();
                assert!((acc[(i, j)] - target[(i, j)]).abs() < 5.0 * se + 1e-12, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn binary_round_trip() {
        let basis = kl_decompose(6, &KernelSpec::default(), 7, &KlOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kl.bin");
        basis.write_binary(&path, 2).unwrap();
        let (level, back) = KlBasis::read_binary(&path).unwrap();
        assert_eq!(level, 2);
        assert_eq!(back.cells(), 6);
        assert_eq!(back.eigenvalues(), basis.eigenvalues());
        assert_eq!(back.eigenfunctions(), basis.eigenfunctions());
    }

    #[test]
    fn invalid_kernel_is_a_config_error() {
        let spec = KernelSpec {
            correlation_rate: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            kl_decompose(4, &spec, 3, &KlOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
