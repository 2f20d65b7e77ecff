//! Named experiments. Each returns its artifacts in memory; writing them is
//! left to the caller, so a failed run leaves nothing behind.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fixtures::PsiDefinition;
use crate::grid::{build_grid, norm_l2, write_csv, Bump, DomainKind, ScalarField};
use crate::regression::{
    info_identity_mc, lan_mc, plugin_risk_study, write_checks_csv, write_mc_csv, write_risk_csv, MCReport,
};
use crate::rng::random_tangent;
use crate::score::{adjoint_defect, gateaux_check, stability_report, ScoreContext, DENSE_LIMIT};
use crate::spectral::{
    degeneracy_curve, eigendecompose, full_decomposition, range_series, refinement_sweep, DegeneracyPoint,
    EigenMode, RangeClass, SpectralDecomposition, SweepReport,
};
use crate::transport::{range_verdict_with, ray_integral_disk, RangeVerdict};

/// Appendix constant 16 with 10% slack for the collar mask.
pub const DEGENERACY_BOUND: f64 = 17.6;

/// Steps of the linearisation check.
pub const GATEAUX_STEPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Solve,
    VerifyOperators,
    Spectrum,
    Fisher,
    Transport,
    Simulate,
    /// Vanishing efficient information for out-of-range functionals.
    Degeneracy,
    /// Transport obstruction along integral curves.
    Obstruction,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::VerifyOperators => "verify-operators",
            Experiment::Spectrum => "spectrum",
            Experiment::Fisher => "fisher",
            Experiment::Transport => "transport",
            Experiment::Simulate => "simulate",
            Experiment::Degeneracy => "reproduce-thm37",
            Experiment::Obstruction => "reproduce-thm38",
        }
    }
}

/// A named CSV payload.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub summary: Value,
    pub tables: Vec<Table>,
    pub seeds: Vec<u64>,
}

fn csv_of(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn table(name: impl Into<String>, contents: String) -> Table {
    Table { name: name.into(), contents }
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    match experiment {
        Experiment::Solve => solve(cfg),
        Experiment::VerifyOperators => verify_operators(cfg),
        Experiment::Spectrum => spectrum(cfg),
        Experiment::Fisher => fisher(cfg),
        Experiment::Transport => transport(cfg),
        Experiment::Simulate => simulate(cfg),
        Experiment::Degeneracy => reproduce_degeneracy(cfg),
        Experiment::Obstruction => reproduce_obstruction(cfg),
    }
}

/// Forward context at the configured conductivity.
pub fn context(cfg: &ExperimentConfig, n: usize) -> Result<ScoreContext> {
    let grid = build_grid(cfg.fixture.domain(n))?;
    let theta = cfg.theta.realize(&grid)?;
    ScoreContext::with_options(&theta, cfg.fixture, cfg.tolerances.solver)
}

fn solve(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    let mut csv = String::from("n,h_mesh,max_error_vs_closed_form,iterations,relative_residual,c0_hat,identifiable\n");
    for &n in &cfg.resolutions {
        let ctx = context(cfg, n)?;
        let grid = ctx.grid();
        let (u, stats) = ctx
            .operator()
            .solve_dirichlet_with_stats(&cfg.fixture.source(grid), &cfg.fixture.boundary_data(grid))?;
        // the closed form only holds at theta = 1
        let error = cfg.theta.perturbation.is_none().then(|| {
            u.values()
                .iter()
                .zip(grid.nodes())
                .map(|(v, &p)| (v - cfg.fixture.exact_solution(p)).abs())
                .fold(0.0, f64::max)
        });
        let id = ctx.identifiability(cfg.tolerances.mu, cfg.tolerances.c0);
        writeln!(
            csv,
            "{n},{:e},{},{},{:e},{:e},{}",
            grid.h_mesh(),
            error.map_or(String::new(), |e| format!("{e:e}")),
            stats.iterations,
            stats.relative_residual,
            id.c0_hat,
            id.passes
        )
        .ok();
        tables.push(table(format!("u_{n}.csv"), csv_of(|w| write_csv(&u, w))?));
        rows.push(json!({
            "n": n,
            "h_mesh": grid.h_mesh(),
            "max_error_vs_closed_form": error,
            "solve": stats,
            "identifiability": id,
        }));
    }
    tables.insert(0, table("solve.csv", csv));
    Ok(Artifacts { summary: json!({ "experiment": "solve", "fixture": cfg.fixture, "runs": rows }), tables, seeds: vec![] })
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorCheck {
    pub n: usize,
    pub h_mesh: f64,
    pub gateaux_slope: f64,
    pub adjoint_defect: f64,
    pub stability_applicable: bool,
    pub stability_min_ratio: f64,
}

fn verify_operators(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut rows = Vec::new();
    for &n in &cfg.resolutions {
        let ctx = context(cfg, n)?;
        let h = random_tangent(ctx.grid(), cfg.seed, 0);
        let h = h.scale(1.0 / h.sup_norm());
        let g = gateaux_check(&ctx, &h, &GATEAUX_STEPS)?;
        let defect = adjoint_defect(&ctx, 100, cfg.seed)?;
        let stab = stability_report(&ctx, 200, cfg.seed, cfg.tolerances.mu, cfg.tolerances.c0)?;
        rows.push(OperatorCheck {
            n,
            h_mesh: ctx.grid().h_mesh(),
            gateaux_slope: g.slope,
            adjoint_defect: defect,
            stability_applicable: stab.applicable,
            stability_min_ratio: stab.min_ratio_t,
        });
    }
    let mut csv = String::from("n,h_mesh,gateaux_slope,adjoint_defect,defect_over_h,stability_applicable,stability_min_ratio\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e},{},{:e}",
            r.n,
            r.h_mesh,
            r.gateaux_slope,
            r.adjoint_defect,
            r.adjoint_defect / r.h_mesh,
            r.stability_applicable,
            r.stability_min_ratio
        )
        .ok();
    }
    Ok(Artifacts {
        summary: json!({ "experiment": "verify-operators", "fixture": cfg.fixture, "runs": rows }),
        tables: vec![table("operators.csv", csv)],
        seeds: vec![cfg.seed],
    })
}

/// Full decomposition when the grid allows it, otherwise the top `k` pairs.
pub fn decomposition(ctx: &ScoreContext, top_k: usize) -> Result<SpectralDecomposition> {
    let m = ctx.grid().interior_count();
    if m <= DENSE_LIMIT {
        full_decomposition(ctx)
    } else {
        eigendecompose(ctx, top_k.min(m), EigenMode::Iterative)
    }
}

fn spectrum(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let psi_def = cfg.psi();
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for &n in &cfg.resolutions {
        let ctx = context(cfg, n)?;
        let d = decomposition(&ctx, cfg.spectral.top_k)?;
        let psi = psi_def.realize(&ctx)?;
        let series = range_series(&d, &psi, d.len())?;
        let mut csv = String::from("k,lambda,m_n\n");
        for (k, l) in d.eigenvalues().iter().enumerate() {
            let m = series.m_n.get(k).map_or(String::new(), |v| format!("{v:e}"));
            writeln!(csv, "{},{l:e},{m}", k + 1).ok();
        }
        tables.push(table(format!("spectrum_{n}.csv"), csv));
        rows.push(json!({
            "n": n,
            "computed": d.len(),
            "lambda_1": d.eigenvalues().first(),
            "kernel_tol": d.kernel_tol(),
            "kernel_dim": d.kernel_dim(),
            "kernel_resolved": d.kernel_resolved(),
            "positive_count": d.positive_count(),
            "m_n_last": series.m_n.last(),
            "plateau_ratio": series.plateau_ratio(),
            "relative_kernel_component": series.kernel_component_norm / norm_l2(&psi),
        }));
    }
    Ok(Artifacts {
        summary: json!({ "experiment": "spectrum", "fixture": cfg.fixture, "psi": psi_def, "runs": rows }),
        tables,
        seeds: vec![],
    })
}

fn sweep_csv(sweep: &SweepReport) -> String {
    let mut csv = String::from("n,h_mesh,i_inverse,i_value,relative_kernel_component\n");
    for (n, r) in sweep.resolutions.iter().zip(&sweep.reports) {
        writeln!(csv, "{n},{:e},{:e},{:e},{:e}", r.h_mesh, r.i_inverse_full, r.i_value, r.relative_kernel_component)
            .ok();
    }
    csv
}

fn fisher_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    refinement_sweep(cfg.fixture, &cfg.theta, &cfg.psi(), &cfg.resolutions, cfg.spectral.method)
}

fn fisher(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let sweep = fisher_sweep(cfg)?;
    Ok(Artifacts {
        tables: vec![table("fisher.csv", sweep_csv(&sweep))],
        summary: json!({ "experiment": "fisher", "sweep": sweep, "verdict": sweep.verdict }),
        seeds: vec![],
    })
}

fn curves_csv(v: &RangeVerdict) -> String {
    let mut csv = String::from("seed_x,seed_y,kind,integral,travel_time,peak_abs_psi\n");
    for c in &v.curves {
        let kind = serde_json::to_value(c.kind).ok().and_then(|k| k.as_str().map(str::to_owned)).unwrap_or_default();
        writeln!(csv, "{:e},{:e},{kind},{:e},{:e},{:e}", c.seed[0], c.seed[1], c.value, c.travel_time, c.peak).ok();
    }
    csv
}

/// Range verdict on one grid, with `psi` sampled pointwise.
pub fn transport_verdict(cfg: &ExperimentConfig, n: usize) -> Result<RangeVerdict> {
    let ctx = context(cfg, n)?;
    let psi = cfg.psi().realize_pointwise(&ctx)?;
    range_verdict_with(&ctx, &psi, cfg.transport.seeds, cfg.tolerances.trace)
}

fn verdict_summary(n: usize, v: &RangeVerdict) -> Value {
    json!({
        "n": n,
        "verdict": v.verdict,
        "curves": v.curves.len(),
        "unclassified": v.unclassified,
        "max_abs_integral": v.max_abs_integral,
        "threshold": v.threshold,
        "trapped_constant": v.trapped_constant,
        "zero_ray_witness": v.zero_ray_witness,
    })
}

fn transport(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for &n in &cfg.resolutions {
        let v = transport_verdict(cfg, n)?;
        tables.push(table(format!("curves_{n}.csv"), curves_csv(&v)));
        rows.push(verdict_summary(n, &v));
    }
    Ok(Artifacts {
        summary: json!({ "experiment": "transport", "fixture": cfg.fixture, "psi": cfg.psi(), "runs": rows }),
        tables,
        seeds: vec![],
    })
}

/// Four bumps around `center`, the basis of the information identity check.
pub fn identity_basis(ctx: &ScoreContext, center: [f64; 2]) -> Result<Vec<ScalarField>> {
    [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [-0.1, -0.1]]
        .iter()
        .map(|o| Bump::new([center[0] + o[0], center[1] + o[1]], 0.2, 4.0).to_field(ctx.grid()))
        .collect()
}

fn report_value(r: &MCReport) -> Value {
    let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
    if let Some(m) = v.as_object_mut() {
        m.remove("statistics");
    }
    v
}

fn simulate(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let n = cfg.resolutions[0];
    let ctx = context(cfg, n)?;
    let sim = &cfg.simulation;
    let dir = sim.lan_direction.unwrap_or_else(|| crate::config::default_lan_direction(cfg.fixture));
    let h = dir.to_field(ctx.grid())?;
    let lan = lan_mc(&ctx, &h, sim.lan_sample_size, sim.lan_replicates, cfg.seed)?;
    let basis = identity_basis(&ctx, dir.center)?;
    let identity = info_identity_mc(&ctx, &basis, sim.identity_sample_size, cfg.seed.wrapping_add(1))?;
    let psi = cfg.psi().realize(&ctx)?;
    let risk = plugin_risk_study(
        &ctx,
        &psi,
        &sim.risk_sample_sizes,
        sim.risk_replicates,
        &sim.estimator,
        cfg.seed.wrapping_add(2),
    )?;
    Ok(Artifacts {
        summary: json!({
            "experiment": "simulate",
            "fixture": cfg.fixture,
            "n": n,
            "lan": report_value(&lan),
            "information_identity": report_value(&identity),
            "plugin_risk": risk,
        }),
        tables: vec![
            table("lan.csv", csv_of(|w| write_mc_csv(&lan, w))?),
            table("lan_checks.csv", csv_of(|w| write_checks_csv(&lan, w))?),
            table("identity_checks.csv", csv_of(|w| write_checks_csv(&identity, w))?),
            table("risk.csv", csv_of(|w| write_risk_csv(&risk, w))?),
        ],
        seeds: vec![cfg.seed, cfg.seed.wrapping_add(1), cfg.seed.wrapping_add(2)],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DegeneracyStudy {
    pub n: usize,
    /// `M_N` over all eigenvalues above the kernel tolerance.
    pub m_n: Vec<f64>,
    /// `M_{N_max} / M_{N_max / 2}`.
    pub growth: f64,
    /// Smallest `N` with `M_N >= 2`.
    pub first_n: Option<usize>,
    pub points: Vec<DegeneracyPoint>,
    pub worst_product: f64,
    pub worst_n: Option<usize>,
    /// Points with `quotient * M_N` above [`DEGENERACY_BOUND`].
    pub violations: usize,
}

/// Range series and the masked degeneracy sequence at every `N` with `M_N >= 2`.
pub fn degeneracy_study(ctx: &ScoreContext, psi: &ScalarField) -> Result<DegeneracyStudy> {
    let d = full_decomposition(ctx)?;
    let series = range_series(&d, psi, d.len())?;
    let growth = series.plateau_ratio();
    let first_n = series.m_n.iter().position(|&m| m >= 2.0).map(|i| i + 1);
    let points: Vec<DegeneracyPoint> = match first_n {
        Some(f) => {
            let ns: Vec<usize> = (f..=series.m_n.len()).collect();
            degeneracy_curve(ctx, &d, psi, &ns)?.into_iter().map(|(_, p)| p).collect()
        }
        None => Vec::new(),
    };
    let (worst_product, worst_n) = points
        .iter()
        .map(|p| (p.quotient * p.m_n, p.n))
        .fold((0.0, None), |a, (v, n)| if v > a.0 { (v, Some(n)) } else { a });
    let violations = points.iter().filter(|p| p.quotient * p.m_n > DEGENERACY_BOUND).count();
    Ok(DegeneracyStudy {
        n: ctx.grid().spec().n1,
        m_n: series.m_n,
        growth,
        first_n,
        points,
        worst_product,
        worst_n,
        violations,
    })
}

/// Largest configured resolution whose information matrix can be formed densely.
fn dense_resolution(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.resolutions
        .iter()
        .rev()
        .copied()
        .find(|&n| {
            build_grid(cfg.fixture.domain(n)).map(|g| g.interior_count() <= DENSE_LIMIT).unwrap_or(false)
        })
        .ok_or_else(|| Error::Config("no resolution is small enough for a full decomposition".into()))
}

fn reproduce_degeneracy(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let sweep = fisher_sweep(cfg)?;
    let n = dense_resolution(cfg)?;
    let ctx = context(cfg, n)?;
    let psi = cfg.psi().realize(&ctx)?;
    let study = degeneracy_study(&ctx, &psi)?;
    let sim = &cfg.simulation;
    let risk = plugin_risk_study(&ctx, &psi, &sim.risk_sample_sizes, sim.risk_replicates, &sim.estimator, cfg.seed)?;

    let mut deg = String::from("n,m_n,quotient,quotient_unmasked,quotient_times_m_n\n");
    for p in &study.points {
        writeln!(deg, "{},{:e},{:e},{:e},{:e}", p.n, p.m_n, p.quotient, p.quotient_unmasked, p.quotient * p.m_n).ok();
    }
    let mut series = String::from("n,m_n\n");
    for (k, m) in study.m_n.iter().enumerate() {
        writeln!(series, "{},{m:e}", k + 1).ok();
    }
    let i_inv: Vec<f64> = sweep.reports.iter().map(|r| r.i_inverse_full).collect();
    let summary = json!({
        "experiment": "reproduce-thm37",
        "fixture": cfg.fixture,
        "psi": cfg.psi(),
        "refinement": {
            "resolutions": sweep.resolutions,
            "i_inverse": i_inv,
            "growth": i_inv.last().zip(i_inv.first()).map(|(l, f)| l / f),
            "verdict": sweep.verdict,
        },
        "range_series": {
            "n": n,
            "n_max": study.m_n.len(),
            "m_n_max": study.m_n.last(),
            "growth": study.growth,
        },
        "degeneracy": {
            "first_n": study.first_n,
            "evaluated": study.points.len(),
            "worst_quotient_times_m_n": study.worst_product,
            "worst_n": study.worst_n,
            "bound": DEGENERACY_BOUND,
            "violations": study.violations,
        },
        "plugin_risk": { "trend_ratio": risk.trend_ratio, "rows": risk.rows },
        "information_vanishes": sweep.verdict.is_out_of_range(),
    });
    Ok(Artifacts {
        summary,
        tables: vec![
            table("fisher.csv", sweep_csv(&sweep)),
            table("range_series.csv", series),
            table("degeneracy.csv", deg),
            table("risk.csv", csv_of(|w| write_risk_csv(&risk, w))?),
        ],
        seeds: vec![cfg.seed],
    })
}

/// Ray integrals `int psi(z e^t) dt` from `directions` equally spaced
/// boundary points into the origin. Needs an analytic functional.
pub fn disk_ray_integrals(psi: &PsiDefinition, directions: usize) -> Result<Vec<([f64; 2], f64)>> {
    let bump = psi
        .analytic()
        .ok_or_else(|| Error::Precondition("ray integrals need an analytic functional".into()))?;
    (0..directions)
        .map(|k| {
            let a = 2.0 * PI * (k as f64 + 0.5) / directions as f64;
            let z = [a.cos(), a.sin()];
            Ok((z, ray_integral_disk(&bump, z)?))
        })
        .collect()
}

fn reproduce_obstruction(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let n = cfg.transport_resolution();
    let v = transport_verdict(cfg, n)?;
    let sweep = fisher_sweep(cfg)?;
    let mut tables = vec![table(format!("curves_{n}.csv"), curves_csv(&v)), table("fisher.csv", sweep_csv(&sweep))];
    let mut rays = Value::Null;
    if cfg.fixture.kind() == DomainKind::UnitDisk && cfg.psi().analytic().is_some() {
        let ints = disk_ray_integrals(&cfg.psi(), 64)?;
        let tol = 1e-4 * cfg.psi().analytic().map_or(1.0, |b| b.amplitude.abs());
        let zero = ints.iter().filter(|(_, i)| i.abs() <= tol).count();
        let mut csv = String::from("z_x,z_y,integral\n");
        for (z, i) in &ints {
            writeln!(csv, "{:e},{:e},{i:e}", z[0], z[1]).ok();
        }
        tables.push(table("rays.csv", csv));
        rays = json!({
            "directions": ints.len(),
            "vanishing": zero,
            "nonvanishing": ints.len() - zero,
            // a functional in the range integrates to the same value y(0) along every ray
            "constant_along_rays": zero == 0 || zero == ints.len(),
        });
    }
    let transport_in = v.verdict.is_compatible();
    let spectral_in = match sweep.verdict {
        RangeClass::InRange => Some(true),
        RangeClass::OutOfRangeDivergent | RangeClass::KernelObstructed => Some(false),
        RangeClass::Undetermined => None,
    };
    let summary = json!({
        "experiment": "reproduce-thm38",
        "fixture": cfg.fixture,
        "psi": cfg.psi(),
        "transport": verdict_summary(n, &v),
        "rays": rays,
        "spectral_verdict": sweep.verdict,
        "verdicts_agree": spectral_in.map(|s| s == transport_in),
    });
    Ok(Artifacts { summary, tables, seeds: vec![] })
}
