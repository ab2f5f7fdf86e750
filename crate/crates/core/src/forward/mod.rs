//! Elliptic forward model, observation operator and data generation.

pub mod fem;
pub mod observation;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::model::{Evaluation, LevelModel, Linearization};
use fem::{FemSpace, ForwardState};
use observation::PointObservation;

/// Parameter-to-observable map of one level together with the data it is
/// compared against. Cloning is cheap; the heavy parts are shared.
#[derive(Debug, Clone)]
pub struct EllipticModel {
    space: Arc<FemSpace>,
    modes: Arc<DMatrix<f64>>,
    obs: Arc<PointObservation>,
    data: Arc<Vec<f64>>,
    sigma: f64,
    recycle: bool,
}

impl EllipticModel {
    /// `modes` maps whitened coefficients to nodal log-permeability.
    pub fn new(
        space: Arc<FemSpace>,
        modes: Arc<DMatrix<f64>>,
        obs: Arc<PointObservation>,
        data: Arc<Vec<f64>>,
        sigma: f64,
    ) -> Result<Self> {
        check_dim("mode matrix rows", space.num_nodes(), modes.nrows())?;
        check_dim("data length", obs.len(), data.len())?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Usage(format!("noise level must be positive, got {sigma}")));
        }
        Ok(EllipticModel {
            space,
            modes,
            obs,
            data,
            sigma,
            recycle: true,
        })
    }

    /// When disabled, every tangent or adjoint solve refactorises the stiffness matrix.
    pub fn with_factor_reuse(mut self, recycle: bool) -> Self {
        self.recycle = recycle;
        self
    }

    pub fn space(&self) -> &FemSpace {
        &self.space
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn log_permeability(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("whitened parameter", self.modes.ncols(), v.len())?;
        Ok(&*self.modes * v)
    }

    fn solve(&self, v: &DVector<f64>, keep: bool) -> Result<(ForwardState, Vec<f64>, f64)> {
        let u = self.log_permeability(v)?;
        let state = self.space.solve(u.as_slice(), keep)?;
        let f = self.obs.apply(&state.pressure);
        let q = self.space.outflow(&state);
        Ok((state, f, q))
    }

    /// Predicted observations and the outflow at `v`.
    pub fn observe(&self, v: &DVector<f64>) -> Result<(Vec<f64>, f64)> {
        let (_, f, q) = self.solve(v, false)?;
        Ok((f, q))
    }

    fn misfit_of(&self, f: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        0.5 * f.iter().zip(self.data.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s2
    }
}

impl LevelModel for EllipticModel {
    type Lin = EllipticLinearization;

    fn param_dim(&self) -> usize {
        self.modes.ncols()
    }

    fn num_observations(&self) -> usize {
        self.obs.len()
    }

    fn evaluate(&self, v: &DVector<f64>) -> Result<Evaluation> {
        let (f, qoi) = self.observe(v)?;
        Ok(Evaluation {
            misfit: self.misfit_of(&f),
            qoi,
        })
    }

    fn linearize(&self, v: &DVector<f64>) -> Result<EllipticLinearization> {
        let (state, f, qoi) = self.solve(v, self.recycle)?;
        let misfit = self.misfit_of(&f);
        Ok(EllipticLinearization {
            model: self.clone(),
            point: v.clone(),
            state,
            forward: f,
            eval: Evaluation { misfit, qoi },
        })
    }
}

/// Forward state at a point, reused for tangent and adjoint solves.
#[derive(Debug, Clone)]
pub struct EllipticLinearization {
    model: EllipticModel,
    point: DVector<f64>,
    state: ForwardState,
    forward: Vec<f64>,
    eval: Evaluation,
}

impl EllipticLinearization {
    pub fn predicted(&self) -> &[f64] {
        &self.forward
    }

    /// Jacobian of the observations applied to `dv`.
    pub fn jacobian_apply(&self, dv: &DVector<f64>) -> Vec<f64> {
        let du = &*self.model.modes * dv;
        let dp = self
            .model
            .space
            .tangent(&self.state, du.as_slice())
            .expect("refactorisation of an accepted state succeeds");
        self.model.obs.apply(&dp)
    }

    /// Transposed Jacobian applied to observation-space weights.
    pub fn jacobian_transpose_apply(&self, w: &[f64]) -> DVector<f64> {
        let nodal = self.model.obs.apply_transpose(w);
        let g = self
            .model
            .space
            .adjoint(&self.state, &nodal)
            .expect("refactorisation of an accepted state succeeds");
        self.model.modes.tr_mul(&DVector::from_vec(g))
    }
}

impl Linearization for EllipticLinearization {
    fn point(&self) -> &DVector<f64> {
        &self.point
    }

    fn evaluation(&self) -> Evaluation {
        self.eval
    }

    fn misfit_gradient(&self) -> DVector<f64> {
        let s2 = self.model.sigma * self.model.sigma;
        let r: Vec<f64> = self
            .forward
            .iter()
            .zip(self.model.data.iter())
            .map(|(f, y)| (f - y) / s2)
            .collect();
        self.jacobian_transpose_apply(&r)
    }

    fn gnh_apply(&self, dv: &DVector<f64>) -> DVector<f64> {
        let s2 = self.model.sigma * self.model.sigma;
        let jv: Vec<f64> = self.jacobian_apply(dv).iter().map(|x| x / s2).collect();
        self.jacobian_transpose_apply(&jv)
    }
}
