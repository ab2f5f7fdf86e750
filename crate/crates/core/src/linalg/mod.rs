//! Linear-algebra building blocks shared by the solvers.

pub mod lanczos;
pub mod sparse;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn symmetric_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = lanczos::dense_symmetric_eigs(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    scaled * vecs.transpose()
}

/// Symmetric inverse square root, failing on non-positive eigenvalues.
pub fn inverse_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, _) = lanczos::dense_symmetric_eigs(m);
    if let Some(bad) = vals.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NotPositiveDefinite(format!("eigenvalue {bad:.3e}")));
    }
    Ok(symmetric_function(m, |v| 1.0 / v.sqrt()))
}
