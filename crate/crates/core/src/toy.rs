//! Linear forward maps with Gaussian noise. Their posteriors are Gaussian and
//! known in closed form, which makes them reference problems for the samplers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::lis::HierarchicalBasis;
use crate::model::{Evaluation, LevelModel, Linearization};
use crate::rng;

/// `y = G v + noise` with `noise ~ N(0, sigma^2 I)` and quantity of interest `c . v`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    g: Arc<DMatrix<f64>>,
    y: Arc<DVector<f64>>,
    sigma: f64,
    qoi: Arc<DVector<f64>>,
}

impl LinearGaussian {
    pub fn new(g: DMatrix<f64>, y: DVector<f64>, sigma: f64, qoi: DVector<f64>) -> Result<Self> {
        check_dim("data length", g.nrows(), y.len())?;
        check_dim("quantity-of-interest weights", g.ncols(), qoi.len())?;
        if !(sigma > 0.0) {
            return Err(Error::Usage(format!("noise level must be positive, got {sigma}")));
        }
        Ok(LinearGaussian {
            g: Arc::new(g),
            y: Arc::new(y),
            sigma,
            qoi: Arc::new(qoi),
        })
    }

    pub fn forward_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn qoi_weights(&self) -> &DVector<f64> {
        &self.qoi
    }

    /// Posterior mean and covariance in whitened coordinates.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.g.ncols();
        let s2 = self.sigma * self.sigma;
        let precision = DMatrix::identity(n, n) + self.g.tr_mul(&self.g) / s2;
        let cov = precision.cholesky().expect("posterior precision is SPD").inverse();
        let mean = &cov * self.g.tr_mul(&self.y) / s2;
        (mean, cov)
    }

    /// Posterior mean and variance of the quantity of interest.
    pub fn posterior_qoi(&self) -> (f64, f64) {
        let (mean, cov) = self.posterior();
        (self.qoi.dot(&mean), self.qoi.dot(&(&cov * &*self.qoi)))
    }
}

impl LevelModel for LinearGaussian {
    type Lin = LinearGaussianPoint;

    fn param_dim(&self) -> usize {
        self.g.ncols()
    }

    fn num_observations(&self) -> usize {
        self.g.nrows()
    }

    fn evaluate(&self, v: &DVector<f64>) -> Result<Evaluation> {
        check_dim("whitened parameter", self.g.ncols(), v.len())?;
        let r = &*self.g * v - &*self.y;
        Ok(Evaluation {
            misfit: 0.5 * r.norm_squared() / (self.sigma * self.sigma),
            qoi: self.qoi.dot(v),
        })
    }

    fn linearize(&self, v: &DVector<f64>) -> Result<LinearGaussianPoint> {
        let eval = self.evaluate(v)?;
        Ok(LinearGaussianPoint {
            model: self.clone(),
            point: v.clone(),
            eval,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LinearGaussianPoint {
    model: LinearGaussian,
    point: DVector<f64>,
    eval: Evaluation,
}

impl Linearization for LinearGaussianPoint {
    fn point(&self) -> &DVector<f64> {
        &self.point
    }

    fn evaluation(&self) -> Evaluation {
        self.eval
    }

    fn misfit_gradient(&self) -> DVector<f64> {
        let m = &self.model;
        let r = &*m.g * &self.point - &*m.y;
        m.g.tr_mul(&r) / (m.sigma * m.sigma)
    }

    fn gnh_apply(&self, dv: &DVector<f64>) -> DVector<f64> {
        let m = &self.model;
        m.g.tr_mul(&(&*m.g * dv)) / (m.sigma * m.sigma)
    }
}

/// Nested linear models mimicking a discretisation hierarchy: level `l` sees
/// the first `dims[l]` columns of a shared forward matrix, scaled by
/// `1 + level_bias * 2^-l`, and data generated from the finest level.
pub fn nested_linear_family(
    dims: &[usize],
    observations: usize,
    sigma: f64,
    level_bias: f64,
    seed: u64,
) -> Result<Vec<LinearGaussian>> {
    if dims.is_empty() || dims.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage(format!("dimensions must be strictly increasing, got {dims:?}")));
    }
    let finest = *dims.last().unwrap();
    let mut r = rng::stream(seed, 0);
    let g_full = DMatrix::from_fn(observations, finest, |_, j| rng::std_normal(&mut r) / (j + 1) as f64);
    let c_full = DVector::from_fn(finest, |j, _| 1.0 / (j + 1) as f64);
    let truth = rng::normal_vector(finest, &mut r);
    let scale = |l: usize| 1.0 + level_bias * 0.5f64.powi(l as i32);
    let y = &g_full * &truth * scale(dims.len() - 1) + sigma * rng::normal_vector(observations, &mut r);
    dims.iter()
        .enumerate()
        .map(|(l, &d)| {
            LinearGaussian::new(
                g_full.columns(0, d) * scale(l),
                y.clone(),
                sigma,
                c_full.rows(0, d).clone_owned(),
            )
        })
        .collect()
}

/// Random nested orthonormal basis with block ranks `ranks`, built the same
/// way as enrichment: each block is orthogonal to the lifted coarser basis.
pub fn random_hierarchy(dims: &[usize], ranks: &[usize], seed: u64) -> Result<HierarchicalBasis> {
    check_dim("block ranks", dims.len(), ranks.len())?;
    let mut r = rng::stream(seed, 1);
    let mut basis = HierarchicalBasis::new();
    for (l, (&d, &s)) in dims.iter().zip(ranks).enumerate() {
        let prev_dim = if l == 0 { 0 } else { dims[l - 1] };
        let prev_rank = if l == 0 { 0 } else { basis.rank(l - 1) };
        if s > d - prev_rank {
            return Err(Error::Usage(format!("rank {s} too large at level {l}")));
        }
        let mut z = DMatrix::from_fn(d, s, |_, _| rng::std_normal(&mut r));
        for _ in 0..2 {
            for k in 0..s {
                let mut col = z.column(k).clone_owned();
                if l > 0 {
                    let head = col.rows(0, prev_dim).clone_owned();
                    let p = basis.project(l - 1, &head);
                    for i in 0..prev_dim {
                        col[i] -= p[i];
                    }
                }
                for j in 0..k {
                    let q = z.column(j).clone_owned();
                    col.axpy(-q.dot(&col), &q, 1.0);
                }
                let n = col.norm();
                z.set_column(k, &(col / n));
            }
        }
        basis.push_level(d, &z, vec![1.0; s])?;
    }
    Ok(basis)
}

/// Well-conditioned random symmetric positive definite matrix.
pub fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 2);
    let g = DMatrix::from_fn(n, n, |_, _| rng::std_normal(&mut r));
    &g * g.transpose() / n.max(1) as f64 + DMatrix::identity(n, n) * 0.1
}
