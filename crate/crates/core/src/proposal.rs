//! Proposal kernels and Metropolis-Hastings acceptance probabilities.
//!
//! All kernels act on whitened coordinates, where the prior is `N(0, I)`.
//! Operator-weighted kernels have the form `v' = A v + B xi` with
//! `A = Psi A_r Psi^T + a_perp (I - Psi Psi^T)` and `B` alike, so they keep the
//! prior invariant whenever `A_r^2 + B_r^2 = I` and `a_perp^2 + b_perp^2 = 1`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::lanczos::dense_symmetric_eigs;
use crate::lis::HierarchicalBasis;
use crate::rng::{self, StreamRng};

fn check_pcn_coefficient(a: f64) -> Result<()> {
    if !(a.abs() < 1.0) {
        return Err(Error::Config(vec![format!(
            "pCN coefficient must lie in (-1, 1), got {a}"
        )]));
    }
    Ok(())
}

/// `a v + sqrt(1 - a^2) xi`.
pub fn pcn_propose(v: &DVector<f64>, a: f64, rng: &mut StreamRng) -> Result<DVector<f64>> {
    check_pcn_coefficient(a)?;
    let xi = rng::normal_vector(v.len(), rng);
    Ok(pcn_propose_with(v, a, &xi))
}

pub fn pcn_propose_with(v: &DVector<f64>, a: f64, xi: &DVector<f64>) -> DVector<f64> {
    v * a + xi * (1.0 - a * a).sqrt()
}

/// Operator pair for one level, fixed for the lifetime of a chain segment.
#[derive(Debug, Clone)]
pub struct DiliOperatorSet {
    level: usize,
    basis: Arc<HierarchicalBasis>,
    sigma_r: DMatrix<f64>,
    a_r: DMatrix<f64>,
    b_r: DMatrix<f64>,
    /// `B_r^{-2}`.
    b_r_inv_sq: DMatrix<f64>,
    a_perp: f64,
    b_perp: f64,
    dt: f64,
    dt_perp: f64,
}

impl DiliOperatorSet {
    /// Operators from the empirical subspace covariance `sigma_r`:
    /// `A_r = (2I + dt Sigma)^{-1} (2I - dt Sigma)` and
    /// `a_perp = (2 - dt_perp) / (2 + dt_perp)`.
    pub fn build(
        basis: Arc<HierarchicalBasis>,
        level: usize,
        sigma_r: &DMatrix<f64>,
        dt: f64,
        dt_perp: f64,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if !(dt > 0.0 && dt.is_finite()) {
            problems.push(format!("subspace jump size must be positive and finite, got {dt}"));
        }
        if !(dt_perp > 0.0 && dt_perp.is_finite()) {
            problems.push(format!("complement jump size must be positive and finite, got {dt_perp}"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if level >= basis.num_levels() {
            return Err(Error::Usage(format!("basis has no level {level}")));
        }
        let r = basis.rank(level);
        check_dim("subspace covariance rows", r, sigma_r.nrows())?;
        check_dim("subspace covariance columns", r, sigma_r.ncols())?;
        let sym = (sigma_r + sigma_r.transpose()) * 0.5;
        let (lambda, q) = dense_symmetric_eigs(&sym);
        if let Some((i, &bad)) = lambda.iter().enumerate().rev().find(|(_, l)| !(**l > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!(
                "subspace covariance eigenvalue {i} is {bad:e}"
            )));
        }
        let coeff_a: Vec<f64> = lambda.iter().map(|l| (2.0 - dt * l) / (2.0 + dt * l)).collect();
        let coeff_b: Vec<f64> = lambda.iter().map(|l| 2.0 * (2.0 * dt * l).sqrt() / (2.0 + dt * l)).collect();
        if let Some(b) = coeff_b.iter().find(|b| !(**b > 0.0)) {
            return Err(Error::Config(vec![format!(
                "jump size {dt} makes the subspace noise operator singular (coefficient {b:e})"
            )]));
        }
        let spectral = |f: &[f64]| &q * DMatrix::from_diagonal(&DVector::from_column_slice(f)) * q.transpose();
        let inv_sq: Vec<f64> = coeff_b.iter().map(|b| 1.0 / (b * b)).collect();
        let a_perp = (2.0 - dt_perp) / (2.0 + dt_perp);
        Ok(DiliOperatorSet {
            level,
            basis,
            sigma_r: sym,
            a_r: spectral(&coeff_a),
            b_r: spectral(&coeff_b),
            b_r_inv_sq: spectral(&inv_sq),
            a_perp,
            b_perp: 2.0 * (2.0 * dt_perp).sqrt() / (2.0 + dt_perp),
            dt,
            dt_perp,
        })
    }

    /// Crank-Nicolson operators with coefficient `a` on every direction.
    /// The basis is expected to have zero rank on `level`.
    pub fn pcn(basis: Arc<HierarchicalBasis>, level: usize, a: f64) -> Result<Self> {
        check_pcn_coefficient(a)?;
        if level >= basis.num_levels() || basis.rank(level) != 0 {
            return Err(Error::Usage("pCN operators need an empty subspace".into()));
        }
        Ok(DiliOperatorSet {
            level,
            basis,
            sigma_r: DMatrix::zeros(0, 0),
            a_r: DMatrix::zeros(0, 0),
            b_r: DMatrix::zeros(0, 0),
            b_r_inv_sq: DMatrix::zeros(0, 0),
            a_perp: a,
            b_perp: (1.0 - a * a).sqrt(),
            dt: f64::NAN,
            dt_perp: 2.0 * (1.0 - a) / (1.0 + a),
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }
    pub fn basis(&self) -> &Arc<HierarchicalBasis> {
        &self.basis
    }
    pub fn rank(&self) -> usize {
        self.a_r.nrows()
    }
    pub fn dim(&self) -> usize {
        self.basis.param_dim(self.level)
    }
    pub fn sigma_r(&self) -> &DMatrix<f64> {
        &self.sigma_r
    }
    pub fn a_r(&self) -> &DMatrix<f64> {
        &self.a_r
    }
    pub fn b_r(&self) -> &DMatrix<f64> {
        &self.b_r
    }
    pub fn b_r_inv_sq(&self) -> &DMatrix<f64> {
        &self.b_r_inv_sq
    }
    pub fn a_perp(&self) -> f64 {
        self.a_perp
    }
    pub fn b_perp(&self) -> f64 {
        self.b_perp
    }
    pub fn jump_sizes(&self) -> (f64, f64) {
        (self.dt, self.dt_perp)
    }

    fn weighted(&self, small: &DMatrix<f64>, scalar: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x * scalar;
        if self.rank() > 0 {
            let coeffs = self.basis.apply_transpose(self.level, x).expect("dimension checked by caller");
            let inner = small * &coeffs - coeffs * scalar;
            out += self.basis.apply(self.level, &inner).expect("rank matches");
        }
        out
    }

    pub fn apply_a(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.dim(), v.len())?;
        Ok(self.weighted(&self.a_r, self.a_perp, v))
    }

    pub fn apply_b(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("noise", self.dim(), xi.len())?;
        Ok(self.weighted(&self.b_r, self.b_perp, xi))
    }

    /// `A v + B xi`.
    pub fn propose_with(&self, v: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.apply_a(v)? + self.apply_b(xi)?)
    }

    pub fn propose(&self, v: &DVector<f64>, rng: &mut StreamRng) -> Result<DVector<f64>> {
        let xi = rng::normal_vector(self.dim(), rng);
        self.propose_with(v, &xi)
    }

    /// Explicit `A` and `B`, for small problems and tests.
    pub fn dense_operators(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = DVector::from_fn(n, |i, _| (i == j) as u8 as f64);
            a.set_column(j, &self.weighted(&self.a_r, self.a_perp, &e));
            b.set_column(j, &self.weighted(&self.b_r, self.b_perp, &e));
        }
        (a, b)
    }
}

/// Low-rank factors of the fine-block conditional of `N(0, B^2)` given its
/// coarse block. With `P = B^{-2}` and `Phi D Phi^T` the low-rank part of
/// `b_perp^2 P_ff - I`:
/// `P_ff^{-1} P_fc r_c = Phi M X r_c` and
/// `P_ff^{-1/2} = b_perp (I + Phi ((D + I)^{-1/2} - I) Phi^T)`.
#[derive(Debug, Clone)]
pub struct ConditionalFactors {
    level: usize,
    phi: DMatrix<f64>,
    d: Vec<f64>,
    m: DMatrix<f64>,
    xi_fc: DMatrix<f64>,
    xi_ff_shifted: DMatrix<f64>,
    noise_shrink: DVector<f64>,
    b_perp: f64,
}

impl ConditionalFactors {
    pub fn precompute(ops: &DiliOperatorSet) -> Result<Self> {
        let level = ops.level;
        if level == 0 {
            return Err(Error::Usage("conditional factors need a coarser level".into()));
        }
        let basis = &ops.basis;
        let block = basis.block(level);
        let s = block.rank();
        let r_prev = basis.rank(level - 1);
        let bp = ops.b_perp;
        let xi = &ops.b_r_inv_sq;
        let xi_fc = xi.view((r_prev, 0), (s, r_prev)).clone_owned();
        let xi_ff = xi.view((r_prev, r_prev), (s, s)).clone_owned();
        let xi_ff_shifted = &xi_ff - DMatrix::identity(s, s) / (bp * bp);
        let n_f = block.fine.nrows();
        let (phi, d, m) = if s == 0 {
            (DMatrix::zeros(n_f, 0), Vec::new(), DMatrix::zeros(0, 0))
        } else {
            let qr = block.fine.clone().qr();
            let (u, t) = (qr.q(), qr.r());
            let core = &t * (&xi_ff * (bp * bp) - DMatrix::identity(s, s)) * t.transpose();
            let (d, w) = dense_symmetric_eigs(&((&core + core.transpose()) * 0.5));
            if let Some(bad) = d.iter().find(|x| !(**x > -1.0)) {
                return Err(Error::NotPositiveDefinite(format!(
                    "fine-block precision has eigenvalue factor {bad:e} <= -1"
                )));
            }
            let scale = DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|x| bp * bp / (1.0 + x))));
            let m = scale * w.transpose() * &t;
            (u * w, d, m)
        };
        let noise_shrink = DVector::from_iterator(d.len(), d.iter().map(|x| 1.0 / (1.0 + x).sqrt() - 1.0));
        Ok(ConditionalFactors {
            level,
            phi,
            d,
            m,
            xi_fc,
            xi_ff_shifted,
            noise_shrink,
            b_perp: bp,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// `-P_ff^{-1} P_fc r_c`.
    pub fn conditional_mean(&self, ops: &DiliOperatorSet, r_c: &DVector<f64>) -> Result<DVector<f64>> {
        let basis = &ops.basis;
        let level = self.level;
        let prev_dim = basis.param_dim(level - 1);
        check_dim("coarse residual", prev_dim, r_c.len())?;
        let n_f = self.phi.nrows();
        if self.m.nrows() == 0 {
            return Ok(DVector::zeros(n_f));
        }
        let coarse_coeffs = basis.apply_transpose(level - 1, r_c)?;
        let z_c = basis.block(level).coarse.tr_mul(r_c);
        let x = &self.xi_fc * coarse_coeffs + &self.xi_ff_shifted * z_c;
        Ok(-(&self.phi * (&self.m * x)))
    }

    /// `P_ff^{-1/2} xi`.
    pub fn whiten_noise(&self, xi: &DVector<f64>) -> DVector<f64> {
        let mut out = xi.clone();
        if self.phi.ncols() > 0 {
            let c = self.phi.tr_mul(xi).component_mul(&self.noise_shrink);
            out += &self.phi * c;
        }
        out * self.b_perp
    }

    /// A draw of `r_f` given `r_c` using explicit standard normal noise.
    pub fn sample_with(&self, ops: &DiliOperatorSet, r_c: &DVector<f64>, xi_f: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("fine noise", self.phi.nrows(), xi_f.len())?;
        Ok(self.conditional_mean(ops, r_c)? + self.whiten_noise(xi_f))
    }
}

/// Fine candidate given the current fine state and a pooled coarse draw,
/// with explicit fine noise.
pub fn coupled_propose_with(
    v_star: &DVector<f64>,
    coarse: &DVector<f64>,
    ops: &DiliOperatorSet,
    factors: &ConditionalFactors,
    xi_f: &DVector<f64>,
) -> Result<DVector<f64>> {
    let level = ops.level;
    if factors.level != level {
        return Err(Error::Usage("conditional factors belong to a different level".into()));
    }
    let av = ops.apply_a(v_star)?;
    let k = ops.basis.param_dim(level - 1);
    check_dim("pooled coarse state", k, coarse.len())?;
    let r_c = coarse - av.rows(0, k);
    let r_f = factors.sample_with(ops, &r_c, xi_f)?;
    let mut out = av;
    out.rows_mut(0, k).copy_from(coarse);
    let n_f = out.len() - k;
    let mut fine = out.rows_mut(k, n_f);
    fine += r_f;
    Ok(out)
}

pub fn coupled_propose(
    v_star: &DVector<f64>,
    coarse: &DVector<f64>,
    ops: &DiliOperatorSet,
    factors: &ConditionalFactors,
    rng: &mut StreamRng,
) -> Result<DVector<f64>> {
    let n_f = ops.dim() - ops.basis.param_dim(ops.level - 1);
    let xi = rng::normal_vector(n_f, rng);
    coupled_propose_with(v_star, coarse, ops, factors, &xi)
}

fn capped_exp(log_ratio: f64, context: &str) -> f64 {
    if log_ratio.is_nan() {
        log::warn!("{context}: misfit is NaN, rejecting");
        return 0.0;
    }
    log_ratio.min(0.0).exp()
}

/// `min(1, exp(eta_star - eta_prime))`.
pub fn accept_base(eta_star: f64, eta_prime: f64) -> f64 {
    capped_exp(eta_star - eta_prime, "base-level acceptance")
}

/// `min(1, exp((eta_fine* - eta_coarse*) - (eta_fine' - eta_coarse')))`,
/// where the starred coarse misfit is evaluated at the coarse component of
/// the current fine state.
pub fn accept_coupled(eta_fine_star: f64, eta_coarse_star: f64, eta_fine_prime: f64, eta_coarse_prime: f64) -> f64 {
    accept_coupled_corrected(eta_fine_star, eta_coarse_star, eta_fine_prime, eta_coarse_prime, 0.0)
}

/// As [`accept_coupled`] with an additional log proposal-density ratio.
pub fn accept_coupled_corrected(
    eta_fine_star: f64,
    eta_coarse_star: f64,
    eta_fine_prime: f64,
    eta_coarse_prime: f64,
    log_correction: f64,
) -> f64 {
    let log_ratio = (eta_fine_star - eta_coarse_star) - (eta_fine_prime - eta_coarse_prime) + log_correction;
    capped_exp(log_ratio, "coupled acceptance")
}

/// Coarse marginal of the level-`l` proposal, `N((A v)_c, (B^2)_cc)`.
///
/// The shortened coupled acceptance ratio drops the proposal and prior
/// density terms, which cancel only if `(A v)_c` is independent of the fine
/// components. This evaluates the dropped term exactly:
/// `log q_c(v'_c | v*) - log q_c(v*_c | v') + |v'_c|^2/2 - |v*_c|^2/2`.
#[derive(Debug, Clone)]
pub struct CoarseMarginal {
    psi_c: DMatrix<f64>,
    kernel: DMatrix<f64>,
    b_perp_sq: f64,
    coarse_dim: usize,
}

impl CoarseMarginal {
    pub fn new(ops: &DiliOperatorSet) -> Result<Self> {
        if ops.level == 0 {
            return Err(Error::Usage("coarse marginal needs a coarser level".into()));
        }
        let k = ops.basis.param_dim(ops.level - 1);
        let r = ops.rank();
        let psi_c = ops.basis.dense(ops.level).rows(0, k).clone_owned();
        let b2 = ops.b_perp * ops.b_perp;
        // (B^2)_cc = b2 I + Psi_c M Psi_c^T with M = B_r^2 - b2 I, inverted
        // by the push-through identity without forming M^{-1}.
        let m = &ops.b_r * &ops.b_r - DMatrix::identity(r, r) * b2;
        let gram = psi_c.tr_mul(&psi_c);
        let inner = DMatrix::identity(r, r) * b2 + &gram * &m;
        let kernel = if r == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let lu = inner.lu();
            let inv = lu
                .try_inverse()
                .ok_or_else(|| Error::Numerical("coarse marginal covariance is singular".into()))?;
            m * inv
        };
        Ok(CoarseMarginal {
            psi_c,
            kernel,
            b_perp_sq: b2,
            coarse_dim: k,
        })
    }

    fn quad(&self, x: &DVector<f64>) -> f64 {
        let mut q = x.norm_squared();
        if self.kernel.nrows() > 0 {
            let c = self.psi_c.tr_mul(x);
            q -= c.dot(&(&self.kernel * &c));
        }
        q / self.b_perp_sq
    }

    /// `A v*` and `A v'` are passed in so callers can reuse them.
    pub fn log_correction(
        &self,
        v_star: &DVector<f64>,
        a_v_star: &DVector<f64>,
        v_prime: &DVector<f64>,
        a_v_prime: &DVector<f64>,
    ) -> f64 {
        let k = self.coarse_dim;
        let fwd = v_prime.rows(0, k) - a_v_star.rows(0, k);
        let bwd = v_star.rows(0, k) - a_v_prime.rows(0, k);
        -0.5 * self.quad(&fwd) + 0.5 * self.quad(&bwd) + 0.5 * v_prime.rows(0, k).norm_squared()
            - 0.5 * v_star.rows(0, k).norm_squared()
    }
}
