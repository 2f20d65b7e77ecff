//! Divergence-form operator `L_theta u = div(theta grad u)`, the Dirichlet
//! solve and the zero-boundary inverse `V_theta`.
//!
//! The discretisation is finite-volume over the grid faces:
//! `(L u)_a = (1/W_a) sum_f c_f kappa_f (u_b - u_a)` with quadrature weight
//! `W_a`. Interior unknowns satisfy `K u = rhs` with the symmetric positive
//! definite stiffness `K = -W L`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::Fixture;
use crate::grid::{grad, laplacian, sobolev_norm, Grid, ScalarField};
use crate::linalg::{pcg, BandedCholesky, CsrMatrix, SolveStats};

/// Conductivities must stay strictly above this value.
pub const ELLIPTICITY_FLOOR: f64 = 0.5;

pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

/// Interior systems larger than this use preconditioned CG by default.
pub const DIRECT_LIMIT: usize = 40_000;

/// A validated conductivity field.
#[derive(Clone, Debug)]
pub struct Conductivity {
    field: ScalarField,
    min_value: f64,
}

impl Conductivity {
    pub fn new(field: ScalarField) -> Result<Self> {
        let grid = field.grid().clone();
        let mut min_value = f64::INFINITY;
        for (node, &v) in field.values().iter().enumerate() {
            if !(v > ELLIPTICITY_FLOOR) {
                return Err(Error::EllipticityFloor { value: v, node });
            }
            if grid.is_boundary(node) && (v - 1.0).abs() > 1e-12 {
                return Err(Error::BoundaryValue { value: v, node });
            }
            min_value = min_value.min(v);
        }
        Ok(Self { field, min_value })
    }

    pub fn one(grid: &Arc<Grid>) -> Self {
        Self { field: ScalarField::constant(grid, 1.0), min_value: 1.0 }
    }

    /// `theta + s h`.
    pub fn perturbed(&self, h: &ScalarField, s: f64) -> Result<Self> {
        Self::new(self.field.axpy(s, h)?)
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.field.grid()
    }

    pub fn min_value(&self) -> f64 {
        self.min_value
    }

    pub fn boundary_value(&self) -> f64 {
        1.0
    }

    /// `H^2` proxy of `theta - 1`, compared against the configured `eta`.
    pub fn deviation_norm(&self) -> f64 {
        sobolev_norm(&self.field.map(|v| v - 1.0), 2).unwrap_or(f64::INFINITY)
    }

    pub fn within_eta(&self, eta: f64) -> bool {
        self.deviation_norm() < eta
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    Auto,
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub mode: SolverMode,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mode: SolverMode::Auto, tol: DEFAULT_SOLVER_TOL, max_iter: 20_000 }
    }
}

/// Face values of a nodal field: the mean of both ends on interior faces,
/// the interior value on faces touching the boundary.
pub fn face_values(grid: &Grid, values: &[f64]) -> Vec<f64> {
    grid.faces()
        .iter()
        .map(|f| if f.boundary { values[f.a] } else { 0.5 * (values[f.a] + values[f.b]) })
        .collect()
}

/// Assembled `L_theta`, with a factorisation serving `V_theta`.
#[derive(Debug)]
pub struct EllipticOperator {
    grid: Arc<Grid>,
    theta: Conductivity,
    face_kappa: Vec<f64>,
    stiffness: CsrMatrix,
    factor: Option<BandedCholesky>,
    options: SolverOptions,
}

pub type LinearOperatorHandle = EllipticOperator;

pub fn assemble(theta: &Conductivity) -> Result<EllipticOperator> {
    EllipticOperator::new(theta, SolverOptions::default())
}

impl EllipticOperator {
    pub fn new(theta: &Conductivity, options: SolverOptions) -> Result<Self> {
        // Re-validate: the field may have been built on another path.
        let theta = Conductivity::new(theta.field().clone())?;
        let grid = theta.grid().clone();
        let face_kappa = face_values(&grid, theta.field().values());
        let m = grid.interior_count();
        let mut t = Vec::with_capacity(5 * m);
        for (face, &kappa) in grid.faces().iter().zip(&face_kappa) {
            let k = face.coef * kappa;
            let ia = grid.interior_index(face.a).expect("face starts at an interior node");
            t.push((ia, ia, k));
            if !face.boundary {
                let ib = grid.interior_index(face.b).expect("interior face");
                t.push((ib, ib, k));
                t.push((ia, ib, -k));
                t.push((ib, ia, -k));
            }
        }
        let stiffness = CsrMatrix::from_triplets(m, t);
        let direct = match options.mode {
            SolverMode::Direct => true,
            SolverMode::Iterative => false,
            SolverMode::Auto => m <= DIRECT_LIMIT,
        };
        let factor = if direct {
            Some(BandedCholesky::factor(&stiffness, grid.bandwidth())?)
        } else {
            None
        };
        Ok(Self { grid, theta, face_kappa, stiffness, factor, options })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn theta(&self) -> &Conductivity {
        &self.theta
    }

    /// `theta` on each grid face, in [`Grid::faces`] order.
    pub fn face_kappa(&self) -> &[f64] {
        &self.face_kappa
    }

    /// `K = -W L` on interior unknowns.
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Matrix of `L_theta` on interior unknowns (homogeneous boundary).
    pub fn operator_matrix(&self) -> CsrMatrix {
        let w = self.interior_weights();
        let mut t = Vec::new();
        for i in 0..self.stiffness.dim() {
            for (j, v) in self.stiffness.row(i) {
                t.push((i, j, -v / w[i]));
            }
        }
        CsrMatrix::from_triplets(self.stiffness.dim(), t)
    }

    pub fn interior_weights(&self) -> Vec<f64> {
        let w = self.grid.quad_weights();
        self.grid.interior_nodes().iter().map(|&k| w[k]).collect()
    }

    /// `L_theta u` at interior nodes, zero on the boundary.
    pub fn apply_l(&self, u: &ScalarField) -> Result<ScalarField> {
        if u.grid().spec() != self.grid.spec() {
            return Err(Error::GridMismatch);
        }
        Ok(flux_divergence(&self.grid, &self.face_kappa, u.values()))
    }

    /// Solves `K x = rhs` on interior unknowns.
    pub fn solve_interior(&self, rhs: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        match &self.factor {
            Some(chol) => {
                let x = chol.solve(rhs);
                let r = self.stiffness.matvec(&x);
                let bn = crate::linalg::norm(rhs);
                let res = if bn == 0.0 {
                    0.0
                } else {
                    r.iter().zip(rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / bn
                };
                Ok((x, SolveStats { iterations: 1, relative_residual: res }))
            }
            None => pcg(&self.stiffness, rhs, self.options.tol, self.options.max_iter),
        }
    }

    /// Solves `div(theta grad u) = f` with `u = g` on the boundary.
    pub fn solve_dirichlet(&self, f: &ScalarField, g: &ScalarField) -> Result<ScalarField> {
        self.solve_dirichlet_with_stats(f, g).map(|(u, _)| u)
    }

    pub fn solve_dirichlet_with_stats(
        &self,
        f: &ScalarField,
        g: &ScalarField,
    ) -> Result<(ScalarField, SolveStats)> {
        if f.grid().spec() != self.grid.spec() || g.grid().spec() != self.grid.spec() {
            return Err(Error::GridMismatch);
        }
        let w = self.grid.quad_weights();
        let mut rhs: Vec<f64> =
            self.grid.interior_nodes().iter().map(|&k| -w[k] * f.values()[k]).collect();
        for (face, &kappa) in self.grid.faces().iter().zip(&self.face_kappa) {
            if face.boundary {
                let ia = self.grid.interior_index(face.a).unwrap();
                rhs[ia] += face.coef * kappa * g.values()[face.b];
            }
        }
        let (x, stats) = self.solve_interior(&rhs)?;
        let mut values = vec![0.0; self.grid.node_count()];
        for (k, v) in values.iter_mut().enumerate() {
            match self.grid.interior_index(k) {
                Some(i) => *v = x[i],
                None => *v = g.values()[k],
            }
        }
        let u = ScalarField::from_values(&self.grid, values)?;
        Ok((u, stats))
    }

    /// `V_theta w`: the solution of `L_theta v = w` vanishing on the boundary.
    pub fn apply_v(&self, w: &ScalarField) -> Result<ScalarField> {
        if w.grid().spec() != self.grid.spec() {
            return Err(Error::GridMismatch);
        }
        let x = self.apply_v_interior(&w.interior_values())?;
        Ok(ScalarField::from_interior(&self.grid, &x))
    }

    /// `V_theta` on dense interior vectors.
    pub fn apply_v_interior(&self, w: &[f64]) -> Result<Vec<f64>> {
        let weights = self.interior_weights();
        let rhs: Vec<f64> = w.iter().zip(&weights).map(|(a, b)| -a * b).collect();
        Ok(self.solve_interior(&rhs)?.0)
    }

    /// `V_theta` on many right-hand sides at once.
    pub fn apply_v_many(&self, ws: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        ws.par_iter().map(|w| self.apply_v_interior(w)).collect()
    }
}

/// `(1/W_a) sum_f c_f kappa_f (u_b - u_a)` at interior nodes.
pub fn flux_divergence(grid: &Arc<Grid>, kappa: &[f64], u: &[f64]) -> ScalarField {
    let mut out = vec![0.0; grid.node_count()];
    for (face, &k) in grid.faces().iter().zip(kappa) {
        let flux = face.coef * k * (u[face.b] - u[face.a]);
        out[face.a] += flux;
        if !face.boundary {
            out[face.b] -= flux;
        }
    }
    let w = grid.quad_weights();
    for &k in grid.interior_nodes() {
        out[k] /= w[k];
    }
    ScalarField::from_values(grid, out).expect("sized from grid")
}

pub fn solve_dirichlet(theta: &Conductivity, f: &ScalarField, g: &ScalarField) -> Result<ScalarField> {
    assemble(theta)?.solve_dirichlet(f, g)
}

pub fn apply_v(theta: &Conductivity, w: &ScalarField) -> Result<ScalarField> {
    assemble(theta)?.apply_v(w)
}

/// Lower bound check on `Delta u + mu |grad u|^2` over interior nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IdentifiabilityReport {
    pub mu: f64,
    pub c0: f64,
    pub c0_hat: f64,
    pub min_grad_norm: f64,
    pub passes: bool,
}

/// Evaluates the identifiability margin for an already solved state `u`.
pub fn identifiability_margin(u: &ScalarField, mu: f64, c0: f64) -> IdentifiabilityReport {
    let lap = laplacian(u);
    let g = grad(u);
    let mut c0_hat = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    for &k in u.grid().interior_nodes() {
        let gv = g.values()[k];
        let g2 = gv[0] * gv[0] + gv[1] * gv[1];
        c0_hat = c0_hat.min(lap.values()[k] + mu * g2);
        min_grad = min_grad.min(g2.sqrt());
    }
    IdentifiabilityReport { mu, c0, c0_hat, min_grad_norm: min_grad, passes: c0_hat > c0 }
}

/// Solves the fixture at `theta` and checks the identifiability margin.
pub fn check_identifiability(
    theta: &Conductivity,
    fixture: Fixture,
    mu: f64,
    c0: f64,
) -> Result<IdentifiabilityReport> {
    let grid = theta.grid();
    let u = solve_dirichlet(theta, &fixture.source(grid), &fixture.boundary_data(grid))?;
    Ok(identifiability_margin(&u, mu, c0))
}
