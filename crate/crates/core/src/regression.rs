//! Monte Carlo experiments on the regression model `Y = u_theta(X) + eps`
//! with `X` uniform on the domain and `eps` standard normal.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::elliptic::solve_dirichlet;
use crate::error::{Error, Result};
use crate::grid::{inner_interpolated, inner_l2, Bump, DomainKind, Grid, ScalarField};
use crate::rng::{derive_seed, stream_rng};
use crate::score::{apply_i_any, ScoreContext};
use crate::spectral::{eigendecompose, EigenMode};

/// Below this many samples an information-identity run is reported without a verdict.
pub const MIN_SAMPLES: usize = 1000;

/// Below this many replicates a replicate study is reported without a verdict.
pub const MIN_REPLICATES: usize = 100;

/// Agreement threshold, in standard errors.
pub const Z_THRESHOLD: f64 = 4.0;

/// Largest tolerated Kolmogorov-Smirnov distance in the LAN check.
pub const KS_THRESHOLD: f64 = 0.05;

/// One observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Sample {
    pub x: [f64; 2],
    pub y: f64,
    pub noise: f64,
}

/// Uniform point of the domain from a generator.
pub fn sample_point<R: Rng + ?Sized>(grid: &Grid, rng: &mut R) -> [f64; 2] {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    match grid.kind() {
        DomainKind::SquareShifted => [1.0 + a, 1.0 + b],
        DomainKind::UnitDisk => {
            let (r, phi) = (a.sqrt(), 2.0 * PI * b);
            [r * phi.cos(), r * phi.sin()]
        }
    }
}

/// Observation `index` of the data set `seed`, drawn with regression
/// function `u`. Each index has its own stream.
pub fn draw_sample(u: &ScalarField, seed: u64, index: u64, noise_scale: f64) -> Sample {
    let mut rng = stream_rng(seed, index);
    let x = sample_point(u.grid(), &mut rng);
    let eps: f64 = rng.sample(StandardNormal);
    let noise = noise_scale * eps;
    Sample { x, y: u.at(x) + noise, noise }
}

/// `n` observations from the model at the context's conductivity.
pub fn sample_data(ctx: &ScoreContext, n: usize, seed: u64) -> Result<Vec<Sample>> {
    sample_from(ctx.u(), n, seed, 1.0)
}

/// `n` observations with regression function `u` and noise level `noise_scale`.
pub fn sample_from(u: &ScalarField, n: usize, seed: u64, noise_scale: f64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    Ok((0..n as u64).into_par_iter().map(|i| draw_sample(u, seed, i, noise_scale)).collect())
}

/// Score `(y - u(x)) (I h)(x)` for a precomputed `I h`.
pub fn score_eval(ctx: &ScoreContext, ih: &ScalarField, sample: &Sample) -> f64 {
    (sample.y - ctx.u().at(sample.x)) * ih.at(sample.x)
}

/// One Monte Carlo comparison.
#[derive(Clone, Debug, Serialize)]
pub struct MCCheck {
    pub name: String,
    pub empirical: f64,
    pub reference: f64,
    pub standard_error: f64,
    /// `(empirical - reference) / standard_error`, or the raw statistic for
    /// checks that are not z-scores.
    pub score: f64,
    pub threshold: f64,
    pub passed: bool,
    /// The same reference with nodal (trapezoid/polar) quadrature, which
    /// differs from the sampled model at second order in the mesh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_reference: Option<f64>,
}

impl MCCheck {
    fn z(name: impl Into<String>, empirical: f64, reference: f64, se: f64) -> Self {
        let diff = empirical - reference;
        let score = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        Self {
            name: name.into(),
            empirical,
            reference,
            standard_error: se,
            score,
            threshold: Z_THRESHOLD,
            passed: score.abs() <= Z_THRESHOLD,
            quadrature_reference: None,
        }
    }

    fn with_quadrature(mut self, q: f64) -> Self {
        self.quadrature_reference = Some(q);
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MCReport {
    pub experiment: String,
    pub seed: u64,
    /// Number of replicates, or of samples for single-data-set studies.
    pub replicates: usize,
    pub sample_size: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub statistics: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub checks: Vec<MCCheck>,
    pub low_power: bool,
    /// `None` when the run is low-powered.
    pub passed: Option<bool>,
}

impl MCReport {
    fn finish(mut self) -> Self {
        self.passed = (!self.low_power).then(|| self.checks.iter().all(|c| c.passed));
        self
    }

    pub fn check(&self, name: &str) -> Option<&MCCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Mean, variance and the standard error of the sample variance.
fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (m2, m4) = xs.iter().fold((0.0, 0.0), |(a, b), &x| {
        let d = (x - mean) * (x - mean);
        (a + d, b + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    let var = m2 * n / (n - 1.0).max(1.0);
    (mean, var, ((m4 - m2 * m2).max(0.0) / n).sqrt())
}

/// Kolmogorov-Smirnov distance between the sample and a normal law.
pub fn ks_distance(xs: &[f64], mean: f64, sd: f64) -> Result<f64> {
    let law = Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = law.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

/// Empirical score second moments `E[A h_j A h_k]` against `<I h_j, I h_k>`
/// of the interpolated fields, plus mean-zero checks, from one data set of
/// size `n`.
pub fn info_identity_mc(ctx: &ScoreContext, hs: &[ScalarField], n: usize, seed: u64) -> Result<MCReport> {
    if hs.is_empty() {
        return Err(Error::InvalidArgument("no perturbation fields".into()));
    }
    let ih = hs.iter().map(|h| apply_i_any(ctx, h)).collect::<Result<Vec<_>>>()?;
    let samples = sample_data(ctx, n, seed)?;
    let scores: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| ih.iter().map(|f| score_eval(ctx, f, s)).collect())
        .collect();
    let m = hs.len();
    let mut checks = Vec::new();
    for j in 0..m {
        let col: Vec<f64> = scores.iter().map(|s| s[j]).collect();
        let (mean, var, _) = moments(&col);
        checks.push(MCCheck::z(format!("mean[{j}]"), mean, 0.0, (var / n as f64).sqrt()));
    }
    for j in 0..m {
        for k in j..m {
            let prod: Vec<f64> = scores.iter().map(|s| s[j] * s[k]).collect();
            let (mean, var, _) = moments(&prod);
            let reference = inner_interpolated(&ih[j], &ih[k])?;
            checks.push(
                MCCheck::z(format!("gram[{j},{k}]"), mean, reference, (var / n as f64).sqrt())
                    .with_quadrature(inner_l2(&ih[j], &ih[k])?),
            );
        }
    }
    let first: Vec<f64> = scores.iter().map(|s| s[0]).collect();
    let (mean, variance, _) = moments(&first);
    Ok(MCReport {
        experiment: "info_identity".into(),
        seed,
        replicates: n,
        sample_size: n,
        statistics: Vec::new(),
        mean,
        variance,
        checks,
        low_power: n < MIN_SAMPLES,
        passed: None,
    }
    .finish())
}

/// Exact Gaussian log-likelihood ratio of `theta + h / sqrt(n)` against
/// `theta`, over `replicates` independent data sets of size `n`. The LAN
/// norm `||I h||^2` is taken over the interpolated field, as sampled.
pub fn lan_mc(ctx: &ScoreContext, h: &ScalarField, n: usize, replicates: usize, seed: u64) -> Result<MCReport> {
    if n == 0 || replicates < 2 {
        return Err(Error::InvalidArgument("need n >= 1 and at least 2 replicates".into()));
    }
    let grid = ctx.grid();
    let theta = ctx.theta().perturbed(h, 1.0 / (n as f64).sqrt())?;
    let fx = ctx.fixture();
    let u_alt = solve_dirichlet(&theta, &fx.source(grid), &fx.boundary_data(grid))?;
    let u0 = ctx.u();
    let stats: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r);
            (0..n as u64)
                .map(|i| {
                    let d = draw_sample(u0, s, i, 1.0);
                    let (a, b) = (d.y - u0.at(d.x), d.y - u_alt.at(d.x));
                    0.5 * (a * a - b * b)
                })
                .sum()
        })
        .collect();
    let ih = apply_i_any(ctx, h)?;
    let lan = inner_interpolated(&ih, &ih)?;
    let lan_quad = inner_l2(&ih, &ih)?;
    let (mean, variance, var_se) = moments(&stats);
    let reps = replicates as f64;
    let mut checks = vec![
        MCCheck::z("mean", mean, -0.5 * lan, (variance / reps).sqrt()).with_quadrature(-0.5 * lan_quad),
        MCCheck::z("variance", variance, lan, var_se).with_quadrature(lan_quad),
    ];
    if lan > 0.0 {
        let ks = ks_distance(&stats, -0.5 * lan, lan.sqrt())?;
        checks.push(MCCheck {
            name: "ks".into(),
            empirical: ks,
            reference: 0.0,
            standard_error: 0.0,
            score: ks,
            threshold: KS_THRESHOLD,
            passed: ks <= KS_THRESHOLD,
            quadrature_reference: None,
        });
    }
    Ok(MCReport {
        experiment: "lan".into(),
        seed,
        replicates,
        sample_size: n,
        statistics: stats,
        mean,
        variance,
        checks,
        low_power: replicates < MIN_REPLICATES,
        passed: None,
    }
    .finish())
}

/// Writes `replicate,statistic,value` rows.
pub fn write_mc_csv<W: Write>(report: &MCReport, mut out: W) -> Result<()> {
    writeln!(out, "replicate,statistic,value")?;
    for (r, v) in report.statistics.iter().enumerate() {
        writeln!(out, "{r},{},{v:e}", report.experiment)?;
    }
    Ok(())
}

pub fn write_checks_csv<W: Write>(report: &MCReport, mut out: W) -> Result<()> {
    writeln!(out, "check,empirical,reference,standard_error,score,threshold,passed")?;
    for c in &report.checks {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{},{}",
            c.name, c.empirical, c.reference, c.standard_error, c.score, c.threshold, c.passed
        )?;
    }
    Ok(())
}

/// Spectral-cutoff least-squares plug-in estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// `K(N) = ceil(cutoff_scale * N^cutoff_exponent)`.
    pub cutoff_scale: f64,
    pub cutoff_exponent: f64,
    /// True perturbation `theta - theta_ctx`; `None` means the context is the truth.
    pub truth: Option<Bump>,
    /// Drop the noise (bias-only sanity mode).
    pub noiseless: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { cutoff_scale: 1.0, cutoff_exponent: 1.0 / 3.0, truth: None, noiseless: false }
    }
}

impl EstimatorConfig {
    pub fn cutoff(&self, n: usize) -> usize {
        ((self.cutoff_scale * (n as f64).powf(self.cutoff_exponent)).ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RiskRow {
    pub n: usize,
    pub k: usize,
    pub replicates: usize,
    pub target: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub variance: f64,
    /// `N * E(estimate - target)^2`.
    pub n_mse: f64,
    pub n_mse_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RiskStudy {
    pub seed: u64,
    pub config: EstimatorConfig,
    pub rows: Vec<RiskRow>,
    /// `n_mse` of the last row over the first.
    pub trend_ratio: f64,
    pub low_power: bool,
}

/// `N * MSE` of the plug-in estimate of `<psi, theta - theta_ctx>` for each
/// sample size. The estimate projects the data residuals onto
/// `I e_1, ..., I e_K` for the top `K(N)` eigenvectors of `I* I`.
pub fn plugin_risk_study(
    ctx: &ScoreContext,
    psi: &ScalarField,
    ns: &[usize],
    replicates: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<RiskStudy> {
    if ns.is_empty() || ns.contains(&0) || replicates < 2 {
        return Err(Error::InvalidArgument("need positive sample sizes and at least 2 replicates".into()));
    }
    let grid = ctx.grid();
    let k_max = ns.iter().map(|&n| config.cutoff(n)).max().unwrap_or(1);
    let decomp = eigendecompose(ctx, k_max, EigenMode::Iterative)?;
    let k_max = k_max.min(decomp.positive_count());
    if k_max == 0 {
        return Err(Error::InsufficientSpectrum("no eigenvalue above the kernel tolerance".into()));
    }
    let coeffs = decomp.coefficients(psi)?;
    let ie = (0..k_max)
        .map(|k| apply_i_any(ctx, &decomp.eigenvector(k)))
        .collect::<Result<Vec<_>>>()?;
    let (u_true, target) = match &config.truth {
        None => (ctx.u().clone(), 0.0),
        Some(b) => {
            let h = b.to_field(grid)?;
            let theta = ctx.theta().perturbed(&h, 1.0)?;
            let fx = ctx.fixture();
            (solve_dirichlet(&theta, &fx.source(grid), &fx.boundary_data(grid))?, inner_l2(psi, &h)?)
        }
    };
    let noise = if config.noiseless { 0.0 } else { 1.0 };
    let mut rows = Vec::with_capacity(ns.len());
    for (idx, &n) in ns.iter().enumerate() {
        let k = config.cutoff(n).min(k_max);
        let base = derive_seed(seed, idx as u64);
        let estimates = (0..replicates as u64)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(base, r);
                let mut gram = DMatrix::<f64>::zeros(k, k);
                let mut rhs = DVector::<f64>::zeros(k);
                let mut phi = vec![0.0; k];
                for i in 0..n as u64 {
                    let d = draw_sample(&u_true, s, i, noise);
                    let resid = d.y - ctx.u().at(d.x);
                    for (p, f) in phi.iter_mut().zip(&ie) {
                        *p = f.at(d.x);
                    }
                    for a in 0..k {
                        rhs[a] += phi[a] * resid;
                        for b in 0..=a {
                            gram[(a, b)] += phi[a] * phi[b];
                        }
                    }
                }
                gram.fill_upper_triangle_with_lower_triangle();
                let coef = gram
                    .cholesky()
                    .ok_or_else(|| Error::Singular(format!("design Gram matrix at N = {n}, K = {k}")))?
                    .solve(&rhs);
                Ok(coef.iter().zip(&coeffs).map(|(a, c)| a * c).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, variance, _) = moments(&estimates);
        let sq: Vec<f64> = estimates.iter().map(|e| n as f64 * (e - target).powi(2)).collect();
        let (n_mse, sq_var, _) = moments(&sq);
        rows.push(RiskRow {
            n,
            k,
            replicates,
            target,
            mean_estimate: mean,
            bias: mean - target,
            variance,
            n_mse,
            n_mse_se: (sq_var / replicates as f64).sqrt(),
        });
    }
    let trend_ratio = rows[rows.len() - 1].n_mse / rows[0].n_mse;
    Ok(RiskStudy { seed, config: config.clone(), rows, trend_ratio, low_power: replicates < MIN_REPLICATES })
}

pub fn write_risk_csv<W: Write>(study: &RiskStudy, mut out: W) -> Result<()> {
    writeln!(out, "n,k,replicates,target,mean_estimate,bias,variance,n_mse,n_mse_se")?;
    for r in &study.rows {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.n, r.k, r.replicates, r.target, r.mean_estimate, r.bias, r.variance, r.n_mse, r.n_mse_se
        )?;
    }
    Ok(())
}
