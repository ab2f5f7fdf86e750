//! The interface between samplers and a discretised forward model.

use nalgebra::DVector;

use crate::error::Result;

/// Data misfit and quantity of interest at one parameter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub misfit: f64,
    pub qoi: f64,
}

/// Derivative information of the misfit at a fixed point.
pub trait Linearization: Send + Sync {
    fn point(&self) -> &DVector<f64>;
    fn evaluation(&self) -> Evaluation;
    fn misfit_gradient(&self) -> DVector<f64>;
    /// Gauss-Newton Hessian of the misfit applied to `dv`.
    fn gnh_apply(&self, dv: &DVector<f64>) -> DVector<f64>;
}

/// A level of the discretisation hierarchy in whitened coordinates.
pub trait LevelModel: Send + Sync {
    type Lin: Linearization;

    fn param_dim(&self) -> usize;
    fn num_observations(&self) -> usize;
    fn evaluate(&self, v: &DVector<f64>) -> Result<Evaluation>;
    fn linearize(&self, v: &DVector<f64>) -> Result<Self::Lin>;
}
