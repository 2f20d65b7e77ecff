//! Linearisation of the forward map, its adjoint and the information
//! operator, plus the verification suite built on them.
//!
//! `T h = div(h grad u)` is discretised with the same face fluxes as the
//! forward operator, so `I h = -V T h` is the exact derivative of the
//! discrete forward map. [`apply_i_sharp`] is the exact adjoint of that
//! derivative in the weighted inner product; [`apply_i_star`] is the
//! continuum formula `grad u . grad V g`, which agrees with it up to
//! discretisation error.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::elliptic::{
    face_values, flux_divergence, identifiability_margin, Conductivity, EllipticOperator,
    IdentifiabilityReport, SolverOptions,
};
use crate::error::{Error, Result};
use crate::fixtures::Fixture;
use crate::grid::{grad, inner_l2, norm_l2, sobolev_norm, Grid, ScalarField, VectorField};
use crate::linalg::CsrMatrix;
use crate::rng::random_tangent;

/// Largest interior dimension for which dense operators are formed.
pub const DENSE_LIMIT: usize = 2500;

/// Forward state at one conductivity.
#[derive(Debug)]
pub struct ScoreContext {
    fixture: Fixture,
    op: EllipticOperator,
    u: ScalarField,
    grad_u: VectorField,
    face_du: Vec<f64>,
}

impl ScoreContext {
    pub fn new(theta: &Conductivity, fixture: Fixture) -> Result<Self> {
        Self::with_options(theta, fixture, SolverOptions::default())
    }

    pub fn with_options(theta: &Conductivity, fixture: Fixture, options: SolverOptions) -> Result<Self> {
        if theta.grid().kind() != fixture.kind() {
            return Err(Error::InvalidArgument(format!(
                "fixture {fixture} does not live on a {:?} grid",
                theta.grid().kind()
            )));
        }
        let op = EllipticOperator::new(theta, options)?;
        let grid = op.grid().clone();
        let u = op.solve_dirichlet(&fixture.source(&grid), &fixture.boundary_data(&grid))?;
        let grad_u = grad(&u);
        let face_du = grid.faces().iter().map(|f| u.values()[f.b] - u.values()[f.a]).collect();
        Ok(Self { fixture, op, u, grad_u, face_du })
    }

    /// Context at `theta = 1` on the fixture grid of nominal resolution `n`.
    pub fn baseline(fixture: Fixture, n: usize) -> Result<Self> {
        let grid = crate::grid::build_grid(fixture.domain(n))?;
        Self::new(&Conductivity::one(&grid), fixture)
    }

    pub fn fixture(&self) -> Fixture {
        self.fixture
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.op.grid()
    }

    pub fn theta(&self) -> &Conductivity {
        self.op.theta()
    }

    pub fn operator(&self) -> &EllipticOperator {
        &self.op
    }

    pub fn u(&self) -> &ScalarField {
        &self.u
    }

    pub fn grad_u(&self) -> &VectorField {
        &self.grad_u
    }

    /// Data-space weights on interior nodes.
    pub fn interior_weights(&self) -> Vec<f64> {
        self.op.interior_weights()
    }

    /// Parameter-space weights on interior nodes, see [`Grid::param_weights`].
    pub fn param_weights(&self) -> &[f64] {
        self.grid().param_weights()
    }

    fn check_grid(&self, f: &ScalarField) -> Result<()> {
        if f.grid().spec() != self.grid().spec() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn identifiability(&self, mu: f64, c0: f64) -> IdentifiabilityReport {
        identifiability_margin(&self.u, mu, c0)
    }
}

/// `T h = div(h grad u)` at interior nodes.
pub fn apply_t(ctx: &ScoreContext, h: &ScalarField) -> Result<ScalarField> {
    ctx.check_grid(h)?;
    let grid = ctx.grid();
    Ok(flux_divergence(grid, &face_values(grid, h.values()), ctx.u.values()))
}

/// Adjoint of [`apply_t`] from the weighted data space into the parameter
/// space, for arguments vanishing on the boundary. The result is
/// copy-extended to the boundary.
pub fn apply_t_sharp(ctx: &ScoreContext, phi: &ScalarField) -> Result<ScalarField> {
    ctx.check_grid(phi)?;
    let grid = ctx.grid();
    let p = phi.values();
    let mut out = vec![0.0; grid.node_count()];
    for (face, &du) in grid.faces().iter().zip(&ctx.face_du) {
        let share = if face.boundary { 1.0 } else { 0.5 };
        let v = face.coef * share * du * (p[face.b] - p[face.a]);
        out[face.a] -= v;
        if !face.boundary {
            out[face.b] -= v;
        }
    }
    for (&k, pw) in grid.interior_nodes().iter().zip(grid.param_weights()) {
        out[k] /= pw;
    }
    grid.copy_extend(&mut out);
    ScalarField::from_values(grid, out)
}

/// Matrix of `T` on interior unknowns.
pub fn t_matrix(ctx: &ScoreContext) -> CsrMatrix {
    let grid = ctx.grid();
    let w = grid.quad_weights();
    let mut t = Vec::with_capacity(8 * grid.interior_count());
    for (face, &du) in grid.faces().iter().zip(&ctx.face_du) {
        let ia = grid.interior_index(face.a).expect("interior face end");
        let flux = face.coef * du;
        if face.boundary {
            t.push((ia, ia, flux / w[face.a]));
        } else {
            let ib = grid.interior_index(face.b).expect("interior face end");
            for col in [ia, ib] {
                t.push((ia, col, 0.5 * flux / w[face.a]));
                t.push((ib, col, -0.5 * flux / w[face.b]));
            }
        }
    }
    CsrMatrix::from_triplets(grid.interior_count(), t)
}

/// `I h = -V T h`.
pub fn apply_i(ctx: &ScoreContext, h: &ScalarField) -> Result<ScalarField> {
    if !h.is_tangent() {
        log::warn!("perturbation does not vanish on the boundary collar");
    }
    apply_i_any(ctx, h)
}

/// [`apply_i`] without the collar warning, for basis vectors and closure
/// studies.
pub(crate) fn apply_i_any(ctx: &ScoreContext, h: &ScalarField) -> Result<ScalarField> {
    let t = apply_t(ctx, h)?;
    Ok(ctx.op.apply_v(&t)?.scale(-1.0))
}

/// Continuum adjoint formula `grad u . grad V g`.
pub fn apply_i_star(ctx: &ScoreContext, g: &ScalarField) -> Result<ScalarField> {
    ctx.check_grid(g)?;
    let vg = ctx.op.apply_v(g)?;
    ctx.grad_u.dot(&grad(&vg))
}

/// Exact weighted adjoint of the discrete `I`: `-T^# V g`.
pub fn apply_i_sharp(ctx: &ScoreContext, g: &ScalarField) -> Result<ScalarField> {
    ctx.check_grid(g)?;
    let vg = ctx.op.apply_v(g)?;
    Ok(apply_t_sharp(ctx, &vg)?.scale(-1.0))
}

/// Information operator `I* I`, formed with the exact discrete adjoint so
/// that it is self-adjoint and positive semidefinite.
pub fn apply_info(ctx: &ScoreContext, h: &ScalarField) -> Result<ScalarField> {
    apply_i_sharp(ctx, &apply_i_any(ctx, h)?)
}

fn dense_guard(ctx: &ScoreContext) -> Result<usize> {
    let m = ctx.grid().interior_count();
    if m > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "interior dimension {m} exceeds the dense limit {DENSE_LIMIT}"
        )));
    }
    Ok(m)
}

/// Dense matrix of `I` on interior unknowns, one column per unit vector.
pub fn dense_linearisation(ctx: &ScoreContext) -> Result<DMatrix<f64>> {
    let m = dense_guard(ctx)?;
    let grid = ctx.grid();
    let cols: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let h = ScalarField::from_interior(grid, &e);
            apply_i_any(ctx, &h).map(|v| v.interior_values())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(m, m, |i, j| cols[j][i]))
}

/// Symmetric form `P^1/2 (I* I) P^-1/2` of the information operator, where
/// `P` holds the parameter weights.
///
/// Built as `A^T A` with `A = W^1/2 I P^-1/2`. Eigenvectors `v` give
/// `L^2`-orthonormal eigenfunctions `P^-1/2 v`.
pub fn dense_information(ctx: &ScoreContext) -> Result<DMatrix<f64>> {
    let i = dense_linearisation(ctx)?;
    let sw: Vec<f64> = ctx.interior_weights().iter().map(|w| w.sqrt()).collect();
    let sp: Vec<f64> = ctx.param_weights().iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(i.nrows(), i.ncols(), |r, c| sw[r] * i[(r, c)] / sp[c]);
    Ok(a.transpose() * a)
}

/// One remainder measurement of the linearisation check.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GateauxPoint {
    pub s: f64,
    pub remainder: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GateauxReport {
    pub points: Vec<GateauxPoint>,
    pub slope: f64,
}

/// `||G(theta + s h) - G(theta) - s I h||_inf` over `steps`, with the
/// least-squares log-log slope.
pub fn gateaux_check(ctx: &ScoreContext, h: &ScalarField, steps: &[f64]) -> Result<GateauxReport> {
    let grid = ctx.grid();
    let ih = apply_i(ctx, h)?;
    let fixture = ctx.fixture;
    let (f, g) = (fixture.source(grid), fixture.boundary_data(grid));
    let points = steps
        .par_iter()
        .map(|&s| {
            let theta = ctx.theta().perturbed(h, s)?;
            let u = EllipticOperator::new(&theta, SolverOptions::default())?.solve_dirichlet(&f, &g)?;
            let rem = u.axpy(-1.0, &ctx.u)?.axpy(-s, &ih)?.sup_norm();
            Ok(GateauxPoint { s, remainder: rem })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.s.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.remainder.ln()).collect();
    Ok(GateauxReport { slope: ls_slope(&xs, &ys), points })
}

pub(crate) fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `|<I h, g> - <h, I* g>| / (||h|| ||g||)` maximised over random pairs.
pub fn adjoint_defect(ctx: &ScoreContext, pairs: usize, seed: u64) -> Result<f64> {
    let grid = ctx.grid().clone();
    let defects = (0..pairs as u64)
        .into_par_iter()
        .map(|k| {
            let h = random_tangent(&grid, seed, 2 * k);
            let g = crate::rng::random_series(seed, 2 * k + 1);
            let kind = grid.kind();
            let g = ScalarField::from_fn(&grid, |p| g.eval(kind, p));
            let lhs = inner_l2(&apply_i(ctx, &h)?, &g)?;
            let rhs = inner_l2(&h, &apply_i_star(ctx, &g)?)?;
            Ok((lhs - rhs).abs() / (norm_l2(&h) * norm_l2(&g)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(defects.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub applicable: bool,
    pub identifiability: IdentifiabilityReport,
    pub trials: usize,
    pub min_ratio_t: f64,
    pub min_ratio_h2: f64,
}

/// Minima of `||T h|| / ||h||` and `||I h||_H2 / ||h||` over random tangent
/// fields. Fields are drawn from `(seed, trial)`, so equal seeds give matched
/// fields on different grids.
pub fn stability_report(
    ctx: &ScoreContext,
    trials: usize,
    seed: u64,
    mu: f64,
    c0: f64,
) -> Result<StabilityReport> {
    let identifiability = ctx.identifiability(mu, c0);
    if !identifiability.passes {
        return Ok(StabilityReport {
            applicable: false,
            identifiability,
            trials: 0,
            min_ratio_t: f64::NAN,
            min_ratio_h2: f64::NAN,
        });
    }
    let grid = ctx.grid().clone();
    let ratios = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let h = random_tangent(&grid, seed, k);
            let hn = norm_l2(&h);
            let t = norm_l2(&apply_t(ctx, &h)?) / hn;
            let h2 = sobolev_norm(&apply_i(ctx, &h)?, 2)? / hn;
            Ok((t, h2))
        })
        .collect::<Result<Vec<_>>>()?;
    let min_t = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let min_h2 = ratios.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok(StabilityReport {
        applicable: true,
        identifiability,
        trials,
        min_ratio_t: min_t,
        min_ratio_h2: min_h2,
    })
}

/// `(||theta1 - theta2||_L2, ||u1 - u2||_H2)` for the fixture data.
pub fn stability_pair(theta1: &Conductivity, theta2: &Conductivity, fixture: Fixture) -> Result<(f64, f64)> {
    let grid = theta1.grid();
    if theta2.grid().spec() != grid.spec() {
        return Err(Error::GridMismatch);
    }
    for (k, _) in grid.boundary_mask().iter().enumerate().filter(|(_, &b)| b) {
        if theta1.field().values()[k] != theta2.field().values()[k] {
            return Err(Error::Precondition(format!("boundary values differ at node {k}")));
        }
    }
    let (f, g) = (fixture.source(grid), fixture.boundary_data(grid));
    let u1 = crate::elliptic::solve_dirichlet(theta1, &f, &g)?;
    let u2 = crate::elliptic::solve_dirichlet(theta2, &f, &g)?;
    let lhs = norm_l2(&theta1.field().axpy(-1.0, theta2.field())?);
    let rhs = sobolev_norm(&u1.axpy(-1.0, &u2)?, 2)?;
    Ok((lhs, rhs))
}

/// Random conductivity `1 + amplitude * s / ||s||_inf` for a tangent field `s`.
pub fn random_conductivity(grid: &Arc<Grid>, seed: u64, stream: u64, amplitude: f64) -> Result<Conductivity> {
    let s = random_tangent(grid, seed, stream);
    let scale = amplitude / s.sup_norm().max(f64::MIN_POSITIVE);
    Conductivity::new(s.map(|v| 1.0 + scale * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, make_bump, DomainSpec};

    fn square_ctx(n: usize) -> ScoreContext {
        ScoreContext::baseline(Fixture::SquareEx1, n).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let ctx = square_ctx(17);
        let z = ScalarField::zeros(ctx.grid());
        assert_eq!(apply_i(&ctx, &z).unwrap().sup_norm(), 0.0);
        assert_eq!(apply_i_star(&ctx, &z).unwrap().sup_norm(), 0.0);
        assert_eq!(apply_info(&ctx, &z).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn output_vanishes_on_boundary_and_is_linear() {
        let ctx = square_ctx(17);
        let g = ctx.grid().clone();
        let h1 = random_tangent(&g, 1, 0);
        let h2 = random_tangent(&g, 1, 1);
        let i1 = apply_i(&ctx, &h1).unwrap();
        for (v, &b) in i1.values().iter().zip(g.boundary_mask()) {
            if b {
                assert_eq!(*v, 0.0);
            }
        }
        let combo = apply_i(&ctx, &h1.scale(2.0).axpy(-3.0, &h2).unwrap()).unwrap();
        let sep = i1.scale(2.0).axpy(-3.0, &apply_i(&ctx, &h2).unwrap()).unwrap();
        assert!(combo.axpy(-1.0, &sep).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn dense_oracle_matches_matrix_free() {
        let ctx = square_ctx(9);
        let dense = dense_linearisation(&ctx).unwrap();
        let h = make_bump(ctx.grid(), [1.5, 1.5], 0.2, 1.0).unwrap();
        let got = apply_i(&ctx, &h).unwrap().interior_values();
        let want = &dense * nalgebra::DVector::from_vec(h.interior_values());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn t_matrix_matches_apply_t() {
        let ctx = ScoreContext::new(
            &random_conductivity(&build_grid(Fixture::DiskEx2.domain(10)).unwrap(), 8, 0, 0.3).unwrap(),
            Fixture::DiskEx2,
        )
        .unwrap();
        let h = random_tangent(ctx.grid(), 8, 1);
        let want = apply_t(&ctx, &h).unwrap().interior_values();
        let got = t_matrix(&ctx).matvec(&h.interior_values());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn disk_adjoint_of_constant() {
        let ctx = ScoreContext::baseline(Fixture::DiskEx2, 16).unwrap();
        let g = ScalarField::constant(ctx.grid(), 2.0);
        let out = apply_i_star(&ctx, &g).unwrap();
        for (p, v) in ctx.grid().nodes().iter().zip(out.values()) {
            assert!((v - (p[0] * p[0] + p[1] * p[1])).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_adjoint_identity() {
        for ctx in [
            ScoreContext::new(&random_conductivity(&build_grid(DomainSpec::square(17)).unwrap(), 3, 0, 0.3).unwrap(), Fixture::SquareEx1).unwrap(),
            ScoreContext::new(&random_conductivity(&build_grid(Fixture::DiskEx2.domain(10)).unwrap(), 3, 0, 0.3).unwrap(), Fixture::DiskEx2).unwrap(),
        ] {
            let g = ctx.grid().clone();
            for k in 0..5 {
                let h = random_tangent(&g, 4, k);
                let w = random_tangent(&g, 5, k);
                let a = inner_l2(&apply_i(&ctx, &h).unwrap(), &w).unwrap();
                let b = inner_l2(&h, &apply_i_sharp(&ctx, &w).unwrap()).unwrap();
                assert!((a - b).abs() < 1e-12 * (norm_l2(&h) * norm_l2(&w)).max(1e-300));
                let ih = apply_i(&ctx, &h).unwrap();
                let q = inner_l2(&h, &apply_info(&ctx, &h).unwrap()).unwrap();
                assert!((q - norm_l2(&ih).powi(2)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn information_matrix_symmetric_psd() {
        let ctx = square_ctx(9);
        assert_eq!(ctx.grid().interior_count(), 49);
        let m = dense_information(&ctx).unwrap();
        let g = ctx.grid().clone();
        let p = g.param_weights();
        for j in [0, 17, 48] {
            let mut e = vec![0.0; 49];
            e[j] = 1.0;
            let col = apply_info(&ctx, &ScalarField::from_interior(&g, &e)).unwrap().interior_values();
            for i in 0..49 {
                let want = col[i] * (p[i] / p[j]).sqrt();
                assert!((want - m[(i, j)]).abs() < 1e-9 * m.amax());
            }
        }
        assert!((&m - m.transpose()).amax() <= 1e-9);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn adjoint_defect_small_and_decaying() {
        let coarse = adjoint_defect(&square_ctx(17), 20, 9).unwrap();
        let fine = adjoint_defect(&square_ctx(33), 20, 9).unwrap();
        assert!(coarse <= 5.0 / 16.0);
        assert!(fine <= 5.0 / 32.0);
        assert!(fine <= 0.75 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn remainder_is_quadratic() {
        let grid = build_grid(DomainSpec::square(17)).unwrap();
        let theta = random_conductivity(&grid, 2, 0, 0.3).unwrap();
        let ctx = ScoreContext::new(&theta, Fixture::SquareEx1).unwrap();
        let h = random_tangent(&grid, 2, 1);
        let h = h.scale(1.0 / h.sup_norm());
        let r = gateaux_check(&ctx, &h, &[1e-1, 1e-2, 1e-3, 1e-4]).unwrap();
        assert!((r.slope - 2.0).abs() < 0.1, "{:?}", r);
    }

    #[test]
    fn stability_ratios_positive() {
        let ctx = square_ctx(17);
        let r = stability_report(&ctx, 10, 1, 1.0, 0.5).unwrap();
        assert!(r.applicable);
        assert!(r.min_ratio_t > 0.0 && r.min_ratio_h2 > 0.0);

        // Single interior hat.
        let g = ctx.grid().clone();
        let mut e = vec![0.0; g.interior_count()];
        e[g.interior_count() / 2] = 1.0;
        let h = ScalarField::from_interior(&g, &e);
        assert!(norm_l2(&apply_t(&ctx, &h).unwrap()) > 0.0);
    }

    #[test]
    fn stability_pair_cases() {
        let grid = build_grid(DomainSpec::square(17)).unwrap();
        let t1 = Conductivity::one(&grid);
        assert_eq!(stability_pair(&t1, &t1, Fixture::SquareEx1).unwrap(), (0.0, 0.0));
        let b = make_bump(&grid, [1.5, 1.5], 0.3, 1.0).unwrap();
        let t2 = t1.perturbed(&b, 0.1).unwrap();
        let (l, r) = stability_pair(&t1, &t2, Fixture::SquareEx1).unwrap();
        assert!(l > 0.0 && r > 0.0 && (l / r).is_finite());
    }
}
