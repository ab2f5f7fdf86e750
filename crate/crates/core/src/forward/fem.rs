//! Bilinear finite elements for `-div(exp(u) grad p) = 0` on the unit square
//! with `p = 0` on the left edge, `p = 1` on the right edge and no flux
//! through the top and bottom edges.
//!
//! The log-permeability `u` is given at the nodes and interpolated to the
//! 2x2 Gauss points of each cell. Free nodes are numbered in a nested
//! dissection order so the Cholesky factor stays sparse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::sparse::{grid_nested_dissection, CholeskyFactor, SymbolicCholesky, UpperCsc};

const FIXED: usize = usize::MAX;

/// Shape values and gradient products at the Gauss points of the unit cell.
///
/// Local nodes are ordered (0,0), (1,0), (1,1), (0,1). Because cells are
/// square, `stiffness[q][a][b] = w_q grad N_a . grad N_b` does not depend on
/// the mesh width.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    pub shape: [[f64; 4]; 4],
    pub stiffness: [[[f64; 4]; 4]; 4],
    pub points: [[f64; 2]; 4],
}

impl ReferenceElement {
    pub fn bilinear() -> Self {
        let g = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
        let points = [[g[0], g[0]], [g[1], g[0]], [g[1], g[1]], [g[0], g[1]]];
        let mut shape = [[0.0; 4]; 4];
        let mut stiffness = [[[0.0; 4]; 4]; 4];
        for (q, &[x, y]) in points.iter().enumerate() {
            shape[q] = [(1.0 - x) * (1.0 - y), x * (1.0 - y), x * y, (1.0 - x) * y];
            let dx = [-(1.0 - y), 1.0 - y, y, -y];
            let dy = [-(1.0 - x), -x, x, 1.0 - x];
            for a in 0..4 {
                for b in 0..4 {
                    stiffness[q][a][b] = 0.25 * (dx[a] * dx[b] + dy[a] * dy[b]);
                }
            }
        }
        ReferenceElement {
            shape,
            stiffness,
            points,
        }
    }
}

/// Mesh, boundary data and sparse structure for one grid resolution.
#[derive(Debug)]
pub struct FemSpace {
    cells: usize,
    reference: ReferenceElement,
    dof_of_node: Vec<usize>,
    dirichlet_value: Vec<f64>,
    num_dofs: usize,
    pattern: UpperCsc,
    symbolic: Arc<SymbolicCholesky>,
    scatter_ptr: Vec<usize>,
    scatter: Vec<(u8, u8, u32)>,
}

/// Output of a forward solve. The factor is kept when later tangent or
/// adjoint solves should reuse it.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub kappa: Vec<f64>,
    pub pressure: Vec<f64>,
    factor: Option<CholeskyFactor>,
}

impl FemSpace {
    pub fn new(cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Usage("mesh needs at least one cell".into()));
        }
        let side = cells + 1;
        let nx = cells.saturating_sub(1);
        let order = grid_nested_dissection(nx, side);
        let mut dof_of_node = vec![FIXED; side * side];
        let mut dirichlet_value = vec![0.0; side * side];
        for j in 0..side {
            for i in 0..side {
                let node = i + side * j;
                if i == 0 {
                    dirichlet_value[node] = 0.0;
                } else if i == cells {
                    dirichlet_value[node] = 1.0;
                } else {
                    dof_of_node[node] = order[(i - 1) + nx * j];
                }
            }
        }
        let num_dofs = nx * side;
        let mut entries = Vec::new();
        for e in 0..cells * cells {
            let nodes = element_nodes(cells, e);
            for &a in &nodes {
                for &b in &nodes {
                    let (da, db) = (dof_of_node[a], dof_of_node[b]);
                    if da != FIXED && db != FIXED && da <= db {
                        entries.push((da, db));
                    }
                }
            }
        }
        let pattern = UpperCsc::from_pattern(num_dofs, entries);
        let mut scatter_ptr = Vec::with_capacity(cells * cells + 1);
        let mut scatter = Vec::new();
        scatter_ptr.push(0);
        for e in 0..cells * cells {
            let nodes = element_nodes(cells, e);
            for a in 0..4 {
                for b in 0..4 {
                    let (da, db) = (dof_of_node[nodes[a]], dof_of_node[nodes[b]]);
                    if da != FIXED && db != FIXED && da <= db {
                        let pos = pattern.position(da, db).expect("pattern contains element pairs");
                        scatter.push((a as u8, b as u8, pos as u32));
                    }
                }
            }
            scatter_ptr.push(scatter.len());
        }
        let symbolic = SymbolicCholesky::analyse(&pattern);
        Ok(FemSpace {
            cells,
            reference: ReferenceElement::bilinear(),
            dof_of_node,
            dirichlet_value,
            num_dofs,
            pattern,
            symbolic,
            scatter_ptr,
            scatter,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn num_nodes(&self) -> usize {
        (self.cells + 1) * (self.cells + 1)
    }

    pub fn num_elements(&self) -> usize {
        self.cells * self.cells
    }

    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    pub fn mesh_width(&self) -> f64 {
        1.0 / self.cells as f64
    }

    pub fn reference(&self) -> &ReferenceElement {
        &self.reference
    }

    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        element_nodes(self.cells, e)
    }

    pub fn is_fixed(&self, node: usize) -> bool {
        self.dof_of_node[node] == FIXED
    }

    /// Permeability at the Gauss points, indexed `4 * element + point`.
    pub fn gauss_permeability(&self, log_perm: &[f64]) -> Result<Vec<f64>> {
        if log_perm.len() != self.num_nodes() {
            return Err(Error::Dimension {
                context: "nodal log-permeability",
                expected: self.num_nodes(),
                got: log_perm.len(),
            });
        }
        let mut kappa = vec![0.0; 4 * self.num_elements()];
        for e in 0..self.num_elements() {
            let nodes = self.element_nodes(e);
            for q in 0..4 {
                let u: f64 = (0..4).map(|a| self.reference.shape[q][a] * log_perm[nodes[a]]).sum();
                let k = u.exp();
                if !(k.is_finite() && k > 0.0) {
                    return Err(Error::Solver(format!(
                        "permeability exp({u:.3e}) is not representable near node {}",
                        nodes[0]
                    )));
                }
                kappa[4 * e + q] = k;
            }
        }
        Ok(kappa)
    }

    fn element_matrix(&self, kappa: &[f64], e: usize) -> [[f64; 4]; 4] {
        let mut k = [[0.0; 4]; 4];
        for q in 0..4 {
            let c = kappa[4 * e + q];
            let s = &self.reference.stiffness[q];
            for a in 0..4 {
                for b in 0..4 {
                    k[a][b] += c * s[a][b];
                }
            }
        }
        k
    }

    /// Stiffness matrix on the free nodes and the lifted right-hand side.
    pub fn assemble(&self, kappa: &[f64]) -> (UpperCsc, Vec<f64>) {
        let mut a = self.pattern.clone();
        let mut rhs = vec![0.0; self.num_dofs];
        for e in 0..self.num_elements() {
            let ke = self.element_matrix(kappa, e);
            for &(la, lb, pos) in &self.scatter[self.scatter_ptr[e]..self.scatter_ptr[e + 1]] {
                a.values[pos as usize] += ke[la as usize][lb as usize];
            }
            let nodes = self.element_nodes(e);
            for la in 0..4 {
                let da = self.dof_of_node[nodes[la]];
                if da == FIXED {
                    continue;
                }
                for lb in 0..4 {
                    let g = self.dirichlet_value[nodes[lb]];
                    if self.dof_of_node[nodes[lb]] == FIXED && g != 0.0 {
                        rhs[da] -= ke[la][lb] * g;
                    }
                }
            }
        }
        (a, rhs)
    }

    fn factorize(&self, kappa: &[f64]) -> Result<(CholeskyFactor, Vec<f64>)> {
        let (a, rhs) = self.assemble(kappa);
        let factor = CholeskyFactor::factorize(&self.symbolic, &a)
            .map_err(|e| Error::Solver(format!("stiffness factorisation failed: {e}")))?;
        Ok((factor, rhs))
    }

    /// Solves the forward problem for nodal log-permeability `log_perm`.
    pub fn solve(&self, log_perm: &[f64], keep_factor: bool) -> Result<ForwardState> {
        let kappa = self.gauss_permeability(log_perm)?;
        let (factor, mut rhs) = self.factorize(&kappa)?;
        factor.solve_in_place(&mut rhs);
        let pressure = self.to_nodal(&rhs, true);
        Ok(ForwardState {
            kappa,
            pressure,
            factor: keep_factor.then_some(factor),
        })
    }

    fn to_nodal(&self, free: &[f64], with_boundary: bool) -> Vec<f64> {
        (0..self.num_nodes())
            .map(|n| match self.dof_of_node[n] {
                FIXED if with_boundary => self.dirichlet_value[n],
                FIXED => 0.0,
                d => free[d],
            })
            .collect()
    }

    fn solve_with(&self, state: &ForwardState, rhs: &mut [f64]) -> Result<()> {
        match &state.factor {
            Some(f) => f.solve_in_place(rhs),
            None => self.factorize(&state.kappa)?.0.solve_in_place(rhs),
        }
        Ok(())
    }

    /// Pressure perturbation caused by a nodal log-permeability perturbation.
    pub fn tangent(&self, state: &ForwardState, du: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = vec![0.0; self.num_dofs];
        for e in 0..self.num_elements() {
            let nodes = self.element_nodes(e);
            let pe = nodes.map(|n| state.pressure[n]);
            for q in 0..4 {
                let dk: f64 = state.kappa[4 * e + q]
                    * (0..4).map(|a| self.reference.shape[q][a] * du[nodes[a]]).sum::<f64>();
                let s = &self.reference.stiffness[q];
                for a in 0..4 {
                    let d = self.dof_of_node[nodes[a]];
                    if d != FIXED {
                        let t: f64 = (0..4).map(|b| s[a][b] * pe[b]).sum();
                        rhs[d] -= dk * t;
                    }
                }
            }
        }
        self.solve_with(state, &mut rhs)?;
        Ok(self.to_nodal(&rhs, false))
    }

    /// Gradient with respect to nodal log-permeability of `w . p`, where `w`
    /// holds nodal weights; weights on fixed nodes are ignored.
    pub fn adjoint(&self, state: &ForwardState, w: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = vec![0.0; self.num_dofs];
        for (n, &d) in self.dof_of_node.iter().enumerate() {
            if d != FIXED {
                rhs[d] = w[n];
            }
        }
        self.solve_with(state, &mut rhs)?;
        let lambda = self.to_nodal(&rhs, false);
        let mut grad = vec![0.0; self.num_nodes()];
        for e in 0..self.num_elements() {
            let nodes = self.element_nodes(e);
            let pe = nodes.map(|n| state.pressure[n]);
            let le = nodes.map(|n| lambda[n]);
            for q in 0..4 {
                let s = &self.reference.stiffness[q];
                let mut form = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        form += le[a] * s[a][b] * pe[b];
                    }
                }
                let g = -state.kappa[4 * e + q] * form;
                for a in 0..4 {
                    grad[nodes[a]] += self.reference.shape[q][a] * g;
                }
            }
        }
        Ok(grad)
    }

    /// Outflow through the left edge computed in weak form with the test
    /// function `1 - x`, which is exact for the discrete solution.
    pub fn outflow(&self, state: &ForwardState) -> f64 {
        let side = self.cells + 1;
        let h = self.mesh_width();
        let mut q = 0.0;
        for e in 0..self.num_elements() {
            let nodes = self.element_nodes(e);
            let ke = self.element_matrix(&state.kappa, e);
            for a in 0..4 {
                let phi = 1.0 - (nodes[a] % side) as f64 * h;
                for b in 0..4 {
                    q -= phi * ke[a][b] * state.pressure[nodes[b]];
                }
            }
        }
        q
    }

    /// Outflow through the left edge from the one-sided flux along the
    /// boundary cells; converges to [`FemSpace::outflow`] under refinement.
    pub fn boundary_flux(&self, state: &ForwardState, log_perm: &[f64]) -> f64 {
        let h = self.mesh_width();
        let mut q = 0.0;
        for j in 0..self.cells {
            let nodes = self.element_nodes(j * self.cells);
            for y in [self.reference.points[0][1], self.reference.points[2][1]] {
                let k = ((1.0 - y) * log_perm[nodes[0]] + y * log_perm[nodes[3]]).exp();
                let dpdx = ((1.0 - y) * (state.pressure[nodes[1]] - state.pressure[nodes[0]])
                    + y * (state.pressure[nodes[2]] - state.pressure[nodes[3]]))
                    / h;
                q += 0.5 * h * k * dpdx;
            }
        }
        q
    }
}

fn element_nodes(cells: usize, e: usize) -> [usize; 4] {
    let side = cells + 1;
    let (i, j) = (e % cells, e / cells);
    let n0 = i + side * j;
    [n0, n0 + 1, n0 + 1 + side, n0 + side]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn smooth_field(cells: usize) -> Vec<f64> {
        let side = cells + 1;
        let h = 1.0 / cells as f64;
        (0..side * side)
            .map(|n| {
                let (x, y) = ((n % side) as f64 * h, (n / side) as f64 * h);
                0.8 * (3.0 * x).sin() * (2.0 * y).cos() + 0.3 * x * y
            })
            .collect()
    }

    #[test]
    fn constant_permeability_gives_linear_pressure() {
        let space = FemSpace::new(8).unwrap();
        let state = space.solve(&vec![0.0; space.num_nodes()], false).unwrap();
        let side = 9;
        for (n, p) in state.pressure.iter().enumerate() {
            let x = (n % side) as f64 / 8.0;
            assert!((p - x).abs() < 1e-12);
        }
        assert!((space.outflow(&state) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_permeability_scales_outflow() {
        let space = FemSpace::new(6).unwrap();
        let state = space.solve(&vec![0.7; space.num_nodes()], false).unwrap();
        assert!((space.outflow(&state) - 0.7f64.exp()).abs() < 1e-12);
    }

    /// Independent assembly from physical coordinates with a fresh Gauss rule.
    fn dense_isoparametric_stiffness(cells: usize, log_perm: &[f64]) -> DMatrix<f64> {
        let side = cells + 1;
        let h = 1.0 / cells as f64;
        let n = side * side;
        let mut k = DMatrix::zeros(n, n);
        let gp = [-1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt()];
        for ej in 0..cells {
            for ei in 0..cells {
                let nodes = [
                    ei + side * ej,
                    ei + 1 + side * ej,
                    ei + 1 + side * (ej + 1),
                    ei + side * (ej + 1),
                ];
                let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
                for &s in &gp {
                    for &t in &gp {
                        let n_at: Vec<f64> =
                            corners.iter().map(|c| 0.25 * (1.0 + c[0] * s) * (1.0 + c[1] * t)).collect();
                        let ds: Vec<f64> = corners.iter().map(|c| 0.25 * c[0] * (1.0 + c[1] * t)).collect();
                        let dt: Vec<f64> = corners.iter().map(|c| 0.25 * c[1] * (1.0 + c[0] * s)).collect();
                        let jac = h / 2.0;
                        let u: f64 = (0..4).map(|a| n_at[a] * log_perm[nodes[a]]).sum();
                        let w = jac * jac * u.exp();
                        for a in 0..4 {
                            for b in 0..4 {
                                k[(nodes[a], nodes[b])] +=
                                    w * (ds[a] * ds[b] + dt[a] * dt[b]) / (jac * jac);
                            }
                        }
                    }
                }
            }
        }
        k
    }

    #[test]
    fn solution_matches_independent_dense_assembly() {
        let cells = 7;
        let side = cells + 1;
        let space = FemSpace::new(cells).unwrap();
        let u = smooth_field(cells);
        let state = space.solve(&u, false).unwrap();
        let k = dense_isoparametric_stiffness(cells, &u);
        let free: Vec<usize> = (0..side * side).filter(|n| !space.is_fixed(*n)).collect();
        let right: Vec<usize> = (0..side * side).filter(|n| n % side == cells).collect();
        let kff = DMatrix::from_fn(free.len(), free.len(), |i, j| k[(free[i], free[j])]);
        let rhs = nalgebra::DVector::from_fn(free.len(), |i, _| -right.iter().map(|&r| k[(free[i], r)]).sum::<f64>());
        let p = kff.lu().solve(&rhs).unwrap();
        for (i, &n) in free.iter().enumerate() {
            assert!((state.pressure[n] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_outflow_agrees_with_boundary_flux_under_refinement() {
        let mut gaps = Vec::new();
        for cells in [10, 20, 40] {
            let space = FemSpace::new(cells).unwrap();
            let side = cells + 1;
            let u: Vec<f64> = (0..side * side)
                .map(|n| {
                    let (x, y) = ((n % side) as f64 / cells as f64, (n / side) as f64 / cells as f64);
                    0.5 * (2.0 * x + y).sin()
                })
                .collect();
            let state = space.solve(&u, false).unwrap();
            gaps.push((space.outflow(&state) - space.boundary_flux(&state, &u)).abs());
        }
        assert!(gaps[2] < gaps[1] && gaps[1] < gaps[0], "{gaps:?}");
        assert!(gaps[2] < 2e-2);
    }

    #[test]
    fn tangent_and_adjoint_are_consistent() {
        let cells = 6;
        let space = FemSpace::new(cells).unwrap();
        let u = smooth_field(cells);
        let state = space.solve(&u, true).unwrap();
        let n = space.num_nodes();
        let du: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.4).collect();
        let w: Vec<f64> = (0..n).map(|i| ((i * 5) % 11) as f64 / 11.0 - 0.5).collect();
        let dp = space.tangent(&state, &du).unwrap();
        let g = space.adjoint(&state, &w).unwrap();
        let lhs: f64 = w.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.iter().zip(&du).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        let step = 1e-6;
        let plus: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + step * b).collect();
        let minus: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - step * b).collect();
        let pp = space.solve(&plus, false).unwrap().pressure;
        let pm = space.solve(&minus, false).unwrap().pressure;
        for i in 0..n {
            let fd = (pp[i] - pm[i]) / (2.0 * step);
            assert!((fd - dp[i]).abs() < 1e-7, "node {i}: {fd} vs {}", dp[i]);
        }
        let fresh = space.solve(&u, false).unwrap();
        let dp2 = space.tangent(&fresh, &du).unwrap();
        assert_eq!(dp, dp2);
    }

    #[test]
    fn overflowing_permeability_is_a_solver_error() {
        let space = FemSpace::new(4).unwrap();
        let mut u = vec![0.0; space.num_nodes()];
        u[7] = 1000.0;
        assert!(matches!(space.solve(&u, false), Err(Error::Solver(_))));
    }
}
