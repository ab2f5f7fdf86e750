//! MAP estimation and the low-rank Gaussian approximation around it.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::lanczos::{lanczos_eigs, LanczosOptions, SymmetricOperator, Target};
use crate::model::{LevelModel, Linearization};
use crate::rng;

/// Gauss-Newton Hessian of a single linearisation as a symmetric operator.
pub struct GnhOperator<'a, L: Linearization>(pub &'a L);

impl<L: Linearization> SymmetricOperator for GnhOperator<'_, L> {
    fn dim(&self) -> usize {
        self.0.point().len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let r = self.0.gnh_apply(&DVector::from_column_slice(x));
        y.copy_from_slice(r.as_slice());
    }
}

#[derive(Debug, Clone)]
pub struct MapOptions {
    pub max_iterations: usize,
    /// Stop when the gradient norm falls below this value; `None` uses
    /// `1e-6 * sqrt(dim)`.
    pub gradient_tol: Option<f64>,
    pub cg_max_iterations: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            max_iterations: 60,
            gradient_tol: None,
            cg_max_iterations: 250,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub point: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `misfit(v) + |v|^2 / 2` by inexact Gauss-Newton with conjugate
/// gradients on `(I + H) p = -g` and Armijo backtracking. Returns the best
/// iterate with `converged = false` when the tolerance is not met.
pub fn find_map<M: LevelModel>(model: &M, start: &DVector<f64>, opts: &MapOptions) -> Result<MapResult> {
    let n = model.param_dim();
    check_dim("MAP starting point", n, start.len())?;
    let tol = opts.gradient_tol.unwrap_or(1e-6 * (n as f64).sqrt());
    let mut v = start.clone();
    let mut lin = model.linearize(&v)?;
    let mut objective = lin.evaluation().misfit + 0.5 * v.norm_squared();
    let mut grad = lin.misfit_gradient() + &v;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let gnorm = grad.norm();
        if gnorm <= tol {
            break;
        }
        iterations += 1;
        let forcing = (0.5f64).min(gnorm.sqrt()) * gnorm;
        let step = conjugate_gradient(|x| lin.gnh_apply(x) + x, &(-&grad), forcing, opts.cg_max_iterations);
        let slope = grad.dot(&step);
        if !(slope < 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let trial = &v + t * &step;
            if let Ok(eval) = model.evaluate(&trial) {
                let value = eval.misfit + 0.5 * trial.norm_squared();
                if value <= objective + 1e-4 * t * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else { break };
        v = next;
        lin = model.linearize(&v)?;
        objective = lin.evaluation().misfit + 0.5 * v.norm_squared();
        grad = lin.misfit_gradient() + &v;
    }
    let gradient_norm = grad.norm();
    Ok(MapResult {
        point: v,
        objective,
        gradient_norm,
        iterations,
        converged: gradient_norm <= tol,
    })
}

fn conjugate_gradient(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> DVector<f64> {
    let mut x = DVector::zeros(rhs.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for _ in 0..max_iter {
        if rr.sqrt() <= tol {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.norm_squared();
        p = &r + (rr_new / rr) * &p;
        rr = rr_new;
    }
    x
}

/// Gaussian `N(map, (I + V diag(lambda) V^T)^{-1})` built from the dominant
/// eigenpairs of the Gauss-Newton Hessian at the MAP point.
#[derive(Debug, Clone)]
pub struct LaplaceApproximation {
    pub map: DVector<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl LaplaceApproximation {
    /// Eigenpairs of the Hessian at `map` above `threshold`, at most `max_rank`.
    pub fn at_point<M: LevelModel>(
        model: &M,
        map: DVector<f64>,
        threshold: f64,
        max_rank: usize,
        opts: &LanczosOptions,
    ) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Usage(format!("truncation threshold must be positive, got {threshold}")));
        }
        let lin = model.linearize(&map)?;
        let pairs = lanczos_eigs(
            &GnhOperator(&lin),
            Target::AboveThreshold {
                threshold,
                max_count: max_rank.min(map.len()),
            },
            opts,
        )?;
        Ok(LaplaceApproximation {
            map,
            eigenvalues: pairs.values,
            eigenvectors: pairs.vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.len()
    }

    /// Maps a standard normal vector to a draw from the approximation.
    pub fn transform(&self, xi: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.eigenvectors.tr_mul(xi);
        let shrink = DVector::from_iterator(
            coeffs.len(),
            coeffs
                .iter()
                .zip(&self.eigenvalues)
                .map(|(c, l)| c * (1.0 - 1.0 / (1.0 + l).sqrt())),
        );
        &self.map + xi - &self.eigenvectors * shrink
    }

    /// Draw `index` of the stream identified by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> DVector<f64> {
        let mut r = rng::stream(seed, index);
        self.transform(&rng::normal_vector(self.dim(), &mut r))
    }

    pub fn samples(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        (0..count as u64).map(|i| self.sample(seed, i)).collect()
    }

    /// Dense covariance matrix, for small problems and tests.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut c = DMatrix::identity(n, n);
        for (k, l) in self.eigenvalues.iter().enumerate() {
            let v = self.eigenvectors.column(k);
            c -= (l / (1.0 + l)) * v * v.transpose();
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::LinearGaussian;

    fn toy() -> LinearGaussian {
        let g = DMatrix::from_row_slice(3, 4, &[1.0, 0.5, 0.0, 0.2, 0.0, 1.5, -0.3, 0.0, 0.4, 0.0, 2.0, 0.1]);
        LinearGaussian::new(g, DVector::from_vec(vec![0.3, -0.2, 0.9]), 0.1, DVector::from_vec(vec![1.0, 0.0, 0.5, 0.0]))
            .unwrap()
    }

    #[test]
    fn map_matches_closed_form_for_linear_model() {
        let m = toy();
        let res = find_map(&m, &DVector::zeros(4), &MapOptions::default()).unwrap();
        assert!(res.converged);
        let (mean, _) = m.posterior();
        assert!((res.point - mean).amax() < 1e-8);
    }

    #[test]
    fn laplace_covariance_is_exact_for_linear_model() {
        let m = toy();
        let (mean, cov) = m.posterior();
        let lap = LaplaceApproximation::at_point(&m, mean, 1e-12, 4, &LanczosOptions::default()).unwrap();
        assert!((lap.covariance() - cov).amax() < 1e-10);
    }

    #[test]
    fn zero_noise_draw_is_the_map() {
        let m = toy();
        let (mean, _) = m.posterior();
        let lap = LaplaceApproximation::at_point(&m, mean.clone(), 1e-3, 4, &LanczosOptions::default()).unwrap();
        assert_eq!(lap.transform(&DVector::zeros(4)), mean);
    }

    #[test]
    fn empirical_covariance_of_draws_matches() {
        let m = toy();
        let (mean, _) = m.posterior();
        let lap = LaplaceApproximation::at_point(&m, mean, 1e-6, 4, &LanczosOptions::default()).unwrap();
        let target = lap.covariance();
        let n = 20_000;
        let draws = lap.samples(3, n);
        let mut acc = DMatrix::zeros(4, 4);
        for d in &draws {
            let c = d - &lap.map;
            acc += &c * c.transpose();
        }
        acc /= n as f64;
        for i in 0..4 {
            for j in 0..4 {
                let se = ((target[(i, i)] * target[(j, j)] + target[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((acc[(i, j)] - target[(i, j)]).abs() < 5.0 * se);
            }
        }
    }

    #[test]
    fn map_is_invariant_to_sensor_order() {
        let g = DMatrix::from_row_slice(3, 4, &[1.0, 0.5, 0.0, 0.2, 0.0, 1.5, -0.3, 0.0, 0.4, 0.0, 2.0, 0.1]);
        let y = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let c = DVector::from_vec(vec![1.0, 0.0, 0.5, 0.0]);
        let perm = [2usize, 0, 1];
        let gp = DMatrix::from_fn(3, 4, |i, j| g[(perm[i], j)]);
        let yp = DVector::from_fn(3, |i, _| y[perm[i]]);
        let a = find_map(&LinearGaussian::new(g, y, 0.1, c.clone()).unwrap(), &DVector::zeros(4), &MapOptions::default())
            .unwrap();
        let b = find_map(&LinearGaussian::new(gp, yp, 0.1, c).unwrap(), &DVector::zeros(4), &MapOptions::default())
            .unwrap();
        assert!((a.point - b.point).amax() < 1e-10);
    }
}
