//! Integral curves of `grad u`, line-integral obstructions, the
//! characteristic transport solve and first-integral kernel elements.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::Fixture;
use crate::elliptic::flux_divergence;
use crate::grid::{grad, norm_l2, DomainKind, Grid, ScalarField, SpatialFunction};
use crate::score::ScoreContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BoundaryExit,
    CriticalPoint,
    StepLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Local error tolerance of the embedded Runge-Kutta pair.
    pub ode_tol: f64,
    /// Critical-point threshold relative to `max |grad u|`.
    pub crit_rel: f64,
    /// Exit points are placed within this distance of the boundary.
    pub dist_tol: f64,
    pub max_steps: usize,
    /// Largest spatial advance per step, in cells.
    pub cell_fraction: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { ode_tol: 1e-8, crit_rel: 1e-6, dist_tol: 1e-9, max_steps: 100_000, cell_fraction: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub t: f64,
    pub x: [f64; 2],
    /// `d gamma / dt` at `x`.
    pub v: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegralCurve {
    pub seed: [f64; 2],
    pub direction: Direction,
    pub samples: Vec<CurveSample>,
    pub termination: Termination,
    /// Elapsed `|t|` at the last sample.
    pub travel_time: f64,
}

impl IntegralCurve {
    pub fn end(&self) -> [f64; 2] {
        self.samples.last().map_or(self.seed, |s| s.x)
    }
}

/// Dormand-Prince 5(4) tableau; the last row doubles as the fifth-order weights.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Tracer<'a> {
    grid: &'a Grid,
    grad_u: &'a [[f64; 2]],
    sign: f64,
    crit: f64,
    opts: TraceOptions,
}

struct Step {
    x: [f64; 2],
    v: [f64; 2],
    err: f64,
}

impl Tracer<'_> {
    fn new<'a>(ctx: &'a ScoreContext, direction: Direction, opts: TraceOptions) -> Tracer<'a> {
        let grad_u = ctx.grad_u();
        Tracer {
            grid: ctx.grid(),
            grad_u: grad_u.values(),
            sign: if direction == Direction::Forward { 1.0 } else { -1.0 },
            crit: opts.crit_rel * grad_u.max_norm(),
            opts,
        }
    }

    fn field(&self, x: [f64; 2]) -> [f64; 2] {
        let g = self.grid.interpolate(self.grad_u, x);
        [self.sign * g[0], self.sign * g[1]]
    }

    fn step(&self, x: [f64; 2], v: [f64; 2], h: f64) -> Step {
        let mut k = [[0.0; 2]; 7];
        k[0] = v;
        for s in 1..7 {
            let mut y = x;
            for (j, kj) in k.iter().enumerate().take(s) {
                y[0] += h * A[s][j] * kj[0];
                y[1] += h * A[s][j] * kj[1];
            }
            k[s] = self.field(y);
            if s == 6 {
                let mut e = [0.0; 2];
                for (j, kj) in k.iter().enumerate() {
                    let d = A[6].get(j).copied().unwrap_or(0.0) - B4[j];
                    e[0] += h * d * kj[0];
                    e[1] += h * d * kj[1];
                }
                return Step { x: y, v: k[6], err: e[0].hypot(e[1]) };
            }
        }
        unreachable!()
    }

    /// Largest step keeping the spatial advance below a fraction of a cell.
    fn cap(&self, v: [f64; 2]) -> f64 {
        let speed = v[0].hypot(v[1]).max(self.crit);
        self.opts.cell_fraction * self.grid.cell_width() / speed
    }

    /// Bisects the step length so that the end point satisfies
    /// `0 <= event < tol`, assuming `event(step(h)) < 0`.
    fn land(&self, x: [f64; 2], v: [f64; 2], h: f64, event: impl Fn(&Step) -> f64, tol: f64) -> (f64, Step) {
        let (mut lo, mut hi) = (0.0, h);
        let mut best = (0.0, Step { x, v, err: 0.0 });
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s = self.step(x, v, mid);
            let e = event(&s);
            if e >= 0.0 {
                lo = mid;
                let done = e < tol;
                best = (mid, s);
                if done {
                    break;
                }
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * h {
                break;
            }
        }
        best
    }

    fn trace(&self, x0: [f64; 2], direction: Direction) -> IntegralCurve {
        let opts = self.opts;
        let mut t = 0.0;
        let mut x = x0;
        let mut v = self.field(x0);
        let mut samples = vec![CurveSample { t, x, v }];
        let finish = |samples: Vec<CurveSample>, termination| {
            let travel_time = samples.last().map_or(0.0, |s: &CurveSample| s.t.abs());
            IntegralCurve { seed: x0, direction, samples, termination, travel_time }
        };
        if v[0].hypot(v[1]) < self.crit {
            return finish(samples, Termination::CriticalPoint);
        }
        let dt_sign = self.sign;
        let mut h = self.cap(v);
        let mut attempts = 0;
        while attempts < opts.max_steps {
            attempts += 1;
            h = h.min(self.cap(v));
            let s = self.step(x, v, h);
            if s.err > opts.ode_tol {
                h *= (0.9 * (opts.ode_tol / s.err).powf(0.2)).max(0.2);
                continue;
            }
            let out = self.grid.boundary_distance(s.x) < 0.0;
            let slow = s.v[0].hypot(s.v[1]) < self.crit;
            if out {
                let grid = self.grid;
                let (hl, sl) = self.land(x, v, h, |s| grid.boundary_distance(s.x), opts.dist_tol);
                t += dt_sign * hl;
                samples.push(CurveSample { t, x: sl.x, v: sl.v });
                return finish(samples, Termination::BoundaryExit);
            }
            if slow {
                let crit = self.crit;
                let (hl, sl) = self.land(x, v, h, |s| s.v[0].hypot(s.v[1]) - crit, 1e-3 * crit);
                t += dt_sign * hl;
                samples.push(CurveSample { t, x: sl.x, v: sl.v });
                return finish(samples, Termination::CriticalPoint);
            }
            t += dt_sign * h;
            x = s.x;
            v = s.v;
            samples.push(CurveSample { t, x, v });
            if self.grid.boundary_distance(x) < opts.dist_tol {
                return finish(samples, Termination::BoundaryExit);
            }
            let grow = if s.err > 0.0 { 0.9 * (opts.ode_tol / s.err).powf(0.2) } else { 5.0 };
            h *= grow.clamp(0.2, 5.0);
        }
        finish(samples, Termination::StepLimit)
    }
}

/// Traces the integral curve of `grad u` (forward) or `-grad u` (backward)
/// from an interior point.
pub fn trace_curve(ctx: &ScoreContext, x0: [f64; 2], direction: Direction) -> Result<IntegralCurve> {
    trace_curve_with(ctx, x0, direction, TraceOptions::default())
}

pub fn trace_curve_with(
    ctx: &ScoreContext,
    x0: [f64; 2],
    direction: Direction,
    opts: TraceOptions,
) -> Result<IntegralCurve> {
    if ctx.grid().boundary_distance(x0) <= opts.dist_tol {
        return Err(Error::Tracing(format!("seed {x0:?} is not an interior point")));
    }
    let curve = Tracer::new(ctx, direction, opts).trace(x0, direction);
    if curve.termination == Termination::StepLimit {
        return Err(Error::Tracing(format!(
            "step limit {} reached from {x0:?} without exit or critical point",
            opts.max_steps
        )));
    }
    Ok(curve)
}

/// `int psi(gamma(t)) dt` over the curve, taken in the direction of the flow.
///
/// Positions between samples come from cubic Hermite interpolation and each
/// segment is integrated with composite Simpson on four panels.
pub fn line_integral(psi: &dyn SpatialFunction, curve: &IntegralCurve) -> f64 {
    const PANELS: usize = 4;
    let mut total = 0.0;
    for w in curve.samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.t - a.t;
        if dt == 0.0 {
            continue;
        }
        let mut seg = 0.0;
        for k in 0..=2 * PANELS {
            let s = k as f64 / (2 * PANELS) as f64;
            let wgt = if k == 0 || k == 2 * PANELS {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            seg += wgt * psi.value_at(hermite(a, b, dt.abs(), s));
        }
        total += seg * dt.abs() / (6.0 * PANELS as f64);
    }
    total
}

fn hermite(a: &CurveSample, b: &CurveSample, dt: f64, s: f64) -> [f64; 2] {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let mut p = [0.0; 2];
    for c in 0..2 {
        p[c] = h00 * a.x[c] + h10 * dt * a.v[c] + h01 * b.x[c] + h11 * dt * b.v[c];
    }
    p
}

/// `int_{-inf}^0 psi(z e^t) dt` along the straight ray from the boundary
/// point `z` into the origin.
pub fn ray_integral_disk(psi: &dyn SpatialFunction, z: [f64; 2]) -> Result<f64> {
    const PANELS: usize = 4096;
    if (z[0].hypot(z[1]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{z:?} is not on the unit circle")));
    }
    let r_min = psi
        .min_support_radius()
        .ok_or_else(|| Error::Precondition("support radius of psi is unknown".into()))?;
    if !(r_min > 0.0) {
        return Err(Error::Precondition("support of psi touches the origin".into()));
    }
    let t_min = (0.5 * r_min).ln();
    let h = -t_min / PANELS as f64;
    let f = |t: f64| {
        let e = t.exp();
        psi.value_at([z[0] * e, z[1] * e])
    };
    let mut s = f(t_min) + f(0.0);
    for k in 1..PANELS {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(t_min + k as f64 * h);
    }
    Ok(s * h / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SeedStrategy {
    /// Regular lattice of `per_axis^2` points over the bounding box, kept if inside.
    Lattice { per_axis: usize },
    /// Lattice plus up to `support` grid nodes where `|psi| > max|psi| / 2`.
    LatticeAndSupport { per_axis: usize, support: usize },
}

impl Default for SeedStrategy {
    fn default() -> Self {
        SeedStrategy::LatticeAndSupport { per_axis: 16, support: 32 }
    }
}

impl SeedStrategy {
    pub fn seeds(&self, grid: &Grid, psi: &ScalarField) -> Vec<[f64; 2]> {
        let (per_axis, support) = match *self {
            SeedStrategy::Lattice { per_axis } => (per_axis, 0),
            SeedStrategy::LatticeAndSupport { per_axis, support } => (per_axis, support),
        };
        let (lo, width) = match grid.kind() {
            DomainKind::SquareShifted => (1.0, 1.0),
            DomainKind::UnitDisk => (-1.0, 2.0),
        };
        let mut seeds = Vec::new();
        for j in 0..per_axis {
            for i in 0..per_axis {
                let p = [
                    lo + width * (i as f64 + 0.5) / per_axis as f64,
                    lo + width * (j as f64 + 0.5) / per_axis as f64,
                ];
                if grid.boundary_distance(p) > grid.cell_width() {
                    seeds.push(p);
                }
            }
        }
        if support > 0 {
            let cut = 0.5 * psi.sup_norm();
            let hot: Vec<usize> = grid
                .interior_nodes()
                .iter()
                .copied()
                .filter(|&k| psi.values()[k].abs() > cut && cut > 0.0)
                .collect();
            let stride = hot.len().div_ceil(support).max(1);
            seeds.extend(hot.iter().step_by(stride).map(|&k| grid.nodes()[k]));
        }
        seeds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// Both ends on the boundary: the integral must vanish.
    Open,
    /// One end at a critical point: the integral, oriented from the critical
    /// point outwards, must equal a common constant.
    Trapped,
    Unclassified,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveIntegral {
    pub seed: [f64; 2],
    pub kind: CurveKind,
    pub value: f64,
    pub travel_time: f64,
    /// Largest `|psi|` seen along the curve.
    pub peak: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportVerdict {
    Incompatible,
    CompatibleWithinTol,
    /// Every boundary-to-boundary curve carries the same nonzero integral.
    ConstantOffsetDetected,
}

impl TransportVerdict {
    pub fn is_compatible(&self) -> bool {
        *self == TransportVerdict::CompatibleWithinTol
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RangeVerdict {
    pub psi_sup: f64,
    pub integral_tol: f64,
    /// Decision threshold, `10 * integral_tol`.
    pub threshold: f64,
    pub curves: Vec<CurveIntegral>,
    /// Worst violation: `|integral|` on open curves, distance to the common
    /// constant on trapped ones.
    pub max_abs_integral: f64,
    pub trapped_constant: Option<f64>,
    /// A trapped curve along which `psi` vanishes while other trapped
    /// integrals do not, forcing the constant to zero.
    pub zero_ray_witness: bool,
    pub unclassified: usize,
    pub verdict: TransportVerdict,
}

/// Largest share of seeds allowed to end without classification.
pub const MAX_UNCLASSIFIED: f64 = 0.05;

fn integrate_through(ctx: &ScoreContext, psi: &ScalarField, seed: [f64; 2], opts: TraceOptions) -> CurveIntegral {
    let back = Tracer::new(ctx, Direction::Backward, opts).trace(seed, Direction::Backward);
    let fwd = Tracer::new(ctx, Direction::Forward, opts).trace(seed, Direction::Forward);
    let value = line_integral(psi, &back) + line_integral(psi, &fwd);
    let peak = back
        .samples
        .iter()
        .chain(&fwd.samples)
        .map(|s| psi.value_at(s.x).abs())
        .fold(0.0, f64::max);
    use Termination::*;
    let (kind, value) = match (back.termination, fwd.termination) {
        (BoundaryExit, BoundaryExit) => (CurveKind::Open, value),
        (CriticalPoint, BoundaryExit) => (CurveKind::Trapped, value),
        (BoundaryExit, CriticalPoint) => (CurveKind::Trapped, -value),
        _ => (CurveKind::Unclassified, value),
    };
    CurveIntegral { seed, kind, value, travel_time: back.travel_time + fwd.travel_time, peak }
}

/// Checks the necessary range condition: `psi` must integrate to zero along
/// every boundary-to-boundary curve, and to one common constant along curves
/// ending in a critical point.
pub fn range_verdict(ctx: &ScoreContext, psi: &ScalarField, seeds: SeedStrategy) -> Result<RangeVerdict> {
    range_verdict_with(ctx, psi, seeds, TraceOptions::default())
}

pub fn range_verdict_with(
    ctx: &ScoreContext,
    psi: &ScalarField,
    seeds: SeedStrategy,
    opts: TraceOptions,
) -> Result<RangeVerdict> {
    let grid = ctx.grid();
    if !Arc::ptr_eq(grid, psi.grid()) && grid.spec() != psi.grid().spec() {
        return Err(Error::GridMismatch);
    }
    let psi_sup = psi.sup_norm();
    if psi_sup == 0.0 {
        return Err(Error::Degenerate("psi is identically zero".into()));
    }
    let integral_tol = 1e-4 * psi_sup;
    let threshold = 10.0 * integral_tol;
    let points = seeds.seeds(grid, psi);
    if points.is_empty() {
        return Err(Error::InvalidArgument("seed strategy produced no interior seeds".into()));
    }
    let curves: Vec<CurveIntegral> = points.par_iter().map(|&p| integrate_through(ctx, psi, p, opts)).collect();

    let unclassified = curves.iter().filter(|c| c.kind == CurveKind::Unclassified).count();
    if unclassified as f64 > MAX_UNCLASSIFIED * curves.len() as f64 {
        return Err(Error::Tracing(format!("{unclassified} of {} curves could not be classified", curves.len())));
    }
    let open: Vec<f64> = curves.iter().filter(|c| c.kind == CurveKind::Open).map(|c| c.value).collect();
    let trapped: Vec<&CurveIntegral> = curves.iter().filter(|c| c.kind == CurveKind::Trapped).collect();

    let trapped_constant = (!trapped.is_empty()).then(|| {
        let mut v: Vec<f64> = trapped.iter().map(|c| c.value).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    });
    let mut max_abs_integral = open.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if let Some(c) = trapped_constant {
        for t in &trapped {
            max_abs_integral = max_abs_integral.max((t.value - c).abs());
        }
    }
    let zero_ray_witness = trapped.iter().any(|c| c.peak <= integral_tol)
        && trapped.iter().any(|c| c.value.abs() > threshold);

    let offset = if open.len() >= 2 {
        let mean = open.iter().sum::<f64>() / open.len() as f64;
        let spread = open.iter().fold(0.0_f64, |m, v| m.max((v - mean).abs()));
        spread <= threshold && mean.abs() > threshold
    } else {
        false
    };
    let verdict = if offset {
        TransportVerdict::ConstantOffsetDetected
    } else if max_abs_integral > threshold {
        TransportVerdict::Incompatible
    } else {
        TransportVerdict::CompatibleWithinTol
    };
    log::debug!("range verdict {verdict:?}: max violation {max_abs_integral:.3e}, threshold {threshold:.3e}");
    Ok(RangeVerdict {
        psi_sup,
        integral_tol,
        threshold,
        curves,
        max_abs_integral,
        trapped_constant,
        zero_ray_witness,
        unclassified,
        verdict,
    })
}

#[derive(Clone, Debug)]
pub struct TransportSolution {
    /// `y` at every node, zero on the inflow boundary.
    pub y: ScalarField,
    /// `max |y|` over outflow boundary nodes.
    pub outflow_mismatch: f64,
    /// Outflow node attaining the mismatch.
    pub worst_node: Option<usize>,
}

fn is_inflow(grid: &Grid, grad_u: [f64; 2], p: [f64; 2]) -> bool {
    let n = grid.outward_normal(p);
    grad_u[0] * n[0] + grad_u[1] * n[1] < 0.0
}

/// Backward trace that may start on the boundary; used for nodal sweeps.
fn sweep_trace(ctx: &ScoreContext, node: usize, opts: TraceOptions) -> IntegralCurve {
    let p = ctx.grid().nodes()[node];
    Tracer::new(ctx, Direction::Backward, opts).trace(p, Direction::Backward)
}

/// Solves `grad u . grad y = psi`, `y = 0` on the inflow boundary, by
/// integrating `dy/dt = psi` along characteristics.
pub fn solve_transport(ctx: &ScoreContext, psi: &ScalarField) -> Result<TransportSolution> {
    let grid = ctx.grid();
    if grid.kind() != DomainKind::SquareShifted {
        return Err(Error::Precondition("transport solve needs a non-trapping field (square fixture)".into()));
    }
    if grid.spec() != psi.grid().spec() {
        return Err(Error::GridMismatch);
    }
    let opts = TraceOptions::default();
    let gu = ctx.grad_u().values();
    let values: Vec<Result<f64>> = (0..grid.node_count())
        .into_par_iter()
        .map(|k| {
            let p = grid.nodes()[k];
            if grid.is_boundary(k) && is_inflow(grid, gu[k], p) {
                return Ok(0.0);
            }
            let curve = sweep_trace(ctx, k, opts);
            match curve.termination {
                Termination::BoundaryExit => Ok(line_integral(psi, &curve)),
                Termination::CriticalPoint => {
                    Err(Error::Tracing(format!("critical point reached tracing back from {p:?}")))
                }
                Termination::StepLimit => Err(Error::Tracing(format!("step limit tracing back from {p:?}"))),
            }
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut outflow_mismatch = 0.0;
    let mut worst_node = None;
    for k in 0..grid.node_count() {
        if grid.is_boundary(k) && !is_inflow(grid, gu[k], grid.nodes()[k]) && values[k].abs() > outflow_mismatch {
            outflow_mismatch = values[k].abs();
            worst_node = Some(k);
        }
    }
    Ok(TransportSolution { y: ScalarField::from_values(grid, values)?, outflow_mismatch, worst_node })
}

/// `Delta u = (f - grad theta . grad u) / theta` at every node.
fn laplacian_u(ctx: &ScoreContext) -> ScalarField {
    let grid = ctx.grid();
    let theta = ctx.theta().field();
    let gt = grad(theta);
    let f = ctx.fixture().source(grid);
    let gu = ctx.grad_u().values();
    let vals = (0..grid.node_count())
        .map(|k| {
            let a = gt.values()[k];
            (f.values()[k] - a[0] * gu[k][0] - a[1] * gu[k][1]) / theta.values()[k]
        })
        .collect();
    ScalarField::from_values(grid, vals).expect("node count matches")
}

/// Relative variation of a supposed first integral tolerated along a curve.
pub const FIRST_INTEGRAL_TOL: f64 = 1e-5;

/// Builds `h = exp(-r) F` where `grad u . grad r = Delta u` with `r = 0` on
/// the inflow boundary; `T h = 0` whenever `F` is a first integral.
pub fn kernel_element(ctx: &ScoreContext, first_integral: &dyn SpatialFunction) -> Result<ScalarField> {
    let grid = ctx.grid();
    let opts = TraceOptions::default();
    let lap = laplacian_u(ctx);
    let gu = ctx.grad_u().values();
    let values: Vec<Result<f64>> = (0..grid.node_count())
        .into_par_iter()
        .map(|k| {
            let p = grid.nodes()[k];
            let f0 = first_integral.value_at(p);
            if grid.is_boundary(k) && is_inflow(grid, gu[k], p) {
                return Ok(f0);
            }
            let curve = sweep_trace(ctx, k, opts);
            if curve.termination == Termination::StepLimit {
                return Err(Error::Tracing(format!("step limit tracing back from {p:?}")));
            }
            let scale = f0.abs().max(1.0);
            for s in &curve.samples {
                let f = first_integral.value_at(s.x);
                if (f - f0).abs() > FIRST_INTEGRAL_TOL * scale {
                    return Err(Error::Precondition(format!(
                        "F is not constant along the curve through {p:?} ({f0} vs {f} at {:?})",
                        s.x
                    )));
                }
            }
            Ok((-line_integral(&lap, &curve)).exp() * f0)
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    ScalarField::from_values(grid, values)
}

/// `||div(h grad u)|| / ||h||` for a field with a meaningful boundary trace.
///
/// Every face takes the mean of its two end values, boundary faces
/// included. [`apply_t`](crate::score::apply_t) closes boundary faces with
/// the interior value instead, which is first order there and only exact for
/// fields vanishing near the boundary.
pub fn kernel_residual(ctx: &ScoreContext, h: &ScalarField) -> Result<f64> {
    let grid = ctx.grid();
    if grid.spec() != h.grid().spec() {
        return Err(Error::GridMismatch);
    }
    let v = h.values();
    let faces: Vec<f64> = grid.faces().iter().map(|f| 0.5 * (v[f.a] + v[f.b])).collect();
    let t = flux_divergence(grid, &faces, ctx.u().values());
    let norm = norm_l2(h);
    if norm == 0.0 {
        return Err(Error::Degenerate("zero field".into()));
    }
    Ok(norm_l2(&t) / norm)
}

/// Curves as CSV polylines: `curve,t,x,y`.
pub fn write_curves_csv<W: Write>(curves: &[IntegralCurve], mut out: W) -> Result<()> {
    writeln!(out, "curve,t,x,y")?;
    for (c, curve) in curves.iter().enumerate() {
        for s in &curve.samples {
            writeln!(out, "{c},{},{},{}", s.t, s.x[0], s.x[1])?;
        }
    }
    Ok(())
}

/// Fixtures whose field has no critical point in the closed domain.
pub fn is_non_trapping(fixture: Fixture) -> bool {
    fixture == Fixture::SquareEx1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnnularBump, Bump};
    use crate::score::{apply_i_sharp, apply_t};

    fn square(n: usize) -> ScoreContext {
        ScoreContext::baseline(Fixture::SquareEx1, n).unwrap()
    }

    #[test]
    fn exit_time_on_square() {
        let c = square(17);
        let curve = trace_curve(&c, [1.5, 1.5], Direction::Forward).unwrap();
        assert_eq!(curve.termination, Termination::BoundaryExit);
        assert!((curve.travel_time - (4.0_f64 / 3.0).ln()).abs() < 1e-6, "{}", curve.travel_time);
        let end = curve.end();
        assert!(c.grid().boundary_distance(end).abs() < 1e-8);
        for s in &curve.samples {
            let want = 1.5 * s.t.exp();
            assert!((s.x[0] - want).abs() < 1e-7 && (s.x[1] - want).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_on_disk_hits_origin() {
        let c = ScoreContext::baseline(Fixture::DiskEx2, 12).unwrap();
        let curve = trace_curve(&c, [0.5, 0.0], Direction::Backward).unwrap();
        assert_eq!(curve.termination, Termination::CriticalPoint);
        assert!(curve.end()[0].hypot(curve.end()[1]) < 1e-5);
        assert!(trace_curve(&c, [1.0, 0.0], Direction::Forward).is_err());
    }

    #[test]
    fn line_integral_matches_dense_oracle() {
        let c = square(33);
        let b = Bump::new([1.6, 1.55], 0.2, 1.0);
        let psi = b.to_field(c.grid()).unwrap();
        let curve = trace_curve(&c, [1.3, 1.3], Direction::Forward).unwrap();
        let got = line_integral(&psi, &curve);
        // Dense trapezoid along the exact ray x0 e^t on the same interpolant.
        let t_end = (2.0_f64 / 1.3).ln();
        let m = 200_000;
        let mut oracle = 0.0;
        for k in 0..=m {
            let t = t_end * k as f64 / m as f64;
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            oracle += w * psi.at([1.3 * t.exp(), 1.3 * t.exp()]);
        }
        oracle *= t_end / m as f64;
        assert!(got > 0.0);
        assert!((got / oracle - 1.0).abs() < 1e-5, "{got} vs {oracle}");
        let zero = ScalarField::zeros(c.grid());
        assert_eq!(line_integral(&zero, &curve), 0.0);
        let away = Bump::new([1.3, 1.75], 0.15, 1.0).to_field(c.grid()).unwrap();
        assert!(line_integral(&away, &curve).abs() <= 1e-10);
    }

    #[test]
    fn radial_ray_integrals() {
        let b = AnnularBump { r_in: 0.3, r_out: 0.6, amplitude: 1.0 };
        let m = 100_000;
        let mut oracle = 0.0;
        for k in 0..=m {
            let r = 0.3 + 0.3 * k as f64 / m as f64;
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            oracle += w * b.radial(r) / r;
        }
        oracle *= 0.3 / m as f64;
        let vals: Vec<f64> = (0..64)
            .map(|j| {
                let a = j as f64 * std::f64::consts::TAU / 64.0;
                ray_integral_disk(&b, [a.cos(), a.sin()]).unwrap()
            })
            .collect();
        for v in &vals {
            assert!((v / oracle - 1.0).abs() < 1e-5);
            assert!((v / vals[0] - 1.0).abs() < 1e-6);
        }
        let zero = |_: [f64; 2]| 0.0;
        assert!(ray_integral_disk(&zero, [1.0, 0.0]).is_err());
        let quad = Bump::new([0.0, 0.5], 0.2, 1.0);
        assert!(ray_integral_disk(&quad, [1.0, 0.0]).unwrap().abs() < 1e-14);
        assert!(ray_integral_disk(&quad, [0.0, 1.0]).unwrap() > 0.0);
        let centred = Bump::new([0.0, 0.0], 0.2, 1.0);
        assert!(matches!(ray_integral_disk(&centred, [1.0, 0.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn verdicts_on_square() {
        let c = square(33);
        let bump = Bump::new([1.5, 1.5], 0.25, 1.0).to_field(c.grid()).unwrap();
        let v = range_verdict(&c, &bump, SeedStrategy::default()).unwrap();
        assert_eq!(v.verdict, TransportVerdict::Incompatible);
        assert!(v.curves.iter().all(|c| c.kind == CurveKind::Open));

        let g = Bump::new([1.5, 1.5], 0.3, 1.0).to_field(c.grid()).unwrap();
        let psi = apply_i_sharp(&c, &g).unwrap();
        let v = range_verdict(&c, &psi, SeedStrategy::default()).unwrap();
        assert_eq!(v.verdict, TransportVerdict::CompatibleWithinTol, "{}", v.max_abs_integral / v.psi_sup);
    }

    #[test]
    fn transport_solution() {
        let c = square(17);
        let zero = ScalarField::zeros(c.grid());
        let s = solve_transport(&c, &zero).unwrap();
        assert_eq!(s.outflow_mismatch, 0.0);
        assert_eq!(s.y.sup_norm(), 0.0);

        let bump = Bump::new([1.5, 1.5], 0.25, 1.0).to_field(c.grid()).unwrap();
        let s = solve_transport(&c, &bump).unwrap();
        assert!(s.outflow_mismatch > 0.0);
        let k = s.worst_node.unwrap();
        let curve = sweep_trace(&c, k, TraceOptions::default());
        let li = line_integral(&bump, &curve);
        assert!((li / s.outflow_mismatch - 1.0).abs() < 1e-4);

        let disk = ScoreContext::baseline(Fixture::DiskEx2, 8).unwrap();
        let z = ScalarField::zeros(disk.grid());
        assert!(solve_transport(&disk, &z).is_err());
    }

    #[test]
    fn first_integral_kernel_elements() {
        let c = square(33);
        let ratio = |x: [f64; 2]| x[0] / x[1];
        let h = kernel_element(&c, &ratio).unwrap();
        // Exact construction: r = 2t from the inflow boundary.
        let p = [1.5, 1.25];
        let t = (p[0] / 1.0_f64).ln().min((p[1] / 1.0_f64).ln());
        let want = (-2.0 * t).exp() * ratio(p);
        let node = c.grid().nodes().iter().position(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12).unwrap();
        assert!((h.values()[node] - want).abs() < 1e-6);
        let res = kernel_residual(&c, &h).unwrap();
        assert!(res <= 10.0 * c.grid().h_mesh(), "{res}");
        // The interior-closed operator only reaches O(sqrt h) on this field.
        let closed = norm_l2(&apply_t(&c, &h).unwrap()) / norm_l2(&h);
        assert!(closed > res);

        let bad = |x: [f64; 2]| x[0];
        assert!(matches!(kernel_element(&c, &bad), Err(Error::Precondition(_))));

        let saddle = ScoreContext::baseline(Fixture::Saddle, 12).unwrap();
        let one = |_: [f64; 2]| 1.0;
        let h = kernel_element(&saddle, &one).unwrap();
        assert!(kernel_residual(&saddle, &h).unwrap() < 1e-10);
        assert!(norm_l2(&apply_t(&saddle, &h).unwrap()) < 1e-10);
    }
}
