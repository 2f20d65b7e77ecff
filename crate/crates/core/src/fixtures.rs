//! The three model configurations: source, boundary data and domain.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::Conductivity;
use crate::error::{Error, Result};
use crate::grid::{Bump, DomainKind, DomainSpec, Grid, ScalarField};
use crate::score::{apply_i_sharp, apply_i_star, ScoreContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Fixture {
    /// Square `[1,2]^2`, `f = 2`, `g = (|x|^2 - 1)/2`; `u_1 = g` and `grad u_1 = x`.
    SquareEx1,
    /// Unit disk, `f = 2`, `g = 0`; `u_1 = (r^2 - 1)/2`, whose gradient vanishes at 0.
    DiskEx2,
    /// Unit disk, `f = 0`, `g = x1^2 - x2^2`; a saddle at the origin.
    Saddle,
}

impl Fixture {
    pub fn name(&self) -> &'static str {
        match self {
            Fixture::SquareEx1 => "square_ex1",
            Fixture::DiskEx2 => "disk_ex2",
            Fixture::Saddle => "saddle",
        }
    }

    pub fn kind(&self) -> DomainKind {
        match self {
            Fixture::SquareEx1 => DomainKind::SquareShifted,
            Fixture::DiskEx2 | Fixture::Saddle => DomainKind::UnitDisk,
        }
    }

    /// Grid for a nominal resolution `n`: `n` nodes per axis on the square,
    /// `n` rings and `2n` angles on the disk.
    pub fn domain(&self, n: usize) -> DomainSpec {
        match self.kind() {
            DomainKind::SquareShifted => DomainSpec::square(n),
            DomainKind::UnitDisk => DomainSpec::disk(n, 2 * n),
        }
    }

    pub fn source(&self, grid: &Arc<Grid>) -> ScalarField {
        match self {
            Fixture::SquareEx1 | Fixture::DiskEx2 => ScalarField::constant(grid, 2.0),
            Fixture::Saddle => ScalarField::zeros(grid),
        }
    }

    pub fn boundary_data(&self, grid: &Arc<Grid>) -> ScalarField {
        match self {
            Fixture::SquareEx1 => ScalarField::from_fn(grid, |p| 0.5 * (p[0] * p[0] + p[1] * p[1] - 1.0)),
            Fixture::DiskEx2 => ScalarField::zeros(grid),
            Fixture::Saddle => ScalarField::from_fn(grid, |p| p[0] * p[0] - p[1] * p[1]),
        }
    }

    /// Closed-form forward solution at `theta = 1`.
    pub fn exact_solution(&self, p: [f64; 2]) -> f64 {
        match self {
            Fixture::SquareEx1 | Fixture::DiskEx2 => 0.5 * (p[0] * p[0] + p[1] * p[1] - 1.0),
            Fixture::Saddle => p[0] * p[0] - p[1] * p[1],
        }
    }
}

impl std::fmt::Display for Fixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Fixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square_ex1" => Ok(Fixture::SquareEx1),
            "disk_ex2" => Ok(Fixture::DiskEx2),
            "saddle" => Ok(Fixture::Saddle),
            other => Err(Error::Config(format!("unknown fixture `{other}`"))),
        }
    }
}

/// Conductivity recipe: 1 plus an optional bump, checked against `eta`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThetaDefinition {
    #[serde(default)]
    pub perturbation: Option<Bump>,
    /// Bound on the `H^2` proxy of `theta - 1`; `None` skips the check.
    #[serde(default)]
    pub eta: Option<f64>,
}

impl ThetaDefinition {
    pub fn realize(&self, grid: &Arc<Grid>) -> Result<Conductivity> {
        let theta = match &self.perturbation {
            None => Conductivity::one(grid),
            Some(b) => Conductivity::one(grid).perturbed(&b.to_field(grid)?, 1.0)?,
        };
        if let Some(eta) = self.eta {
            let dev = theta.deviation_norm();
            if dev >= eta {
                return Err(Error::Precondition(format!(
                    "conductivity perturbation {dev:.4} is not below eta = {eta}"
                )));
            }
        }
        Ok(theta)
    }
}

/// A functional `psi`, resampled on each grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PsiDefinition {
    /// Non-negative bump.
    Bump { center: [f64; 2], radius: f64, amplitude: f64 },
    /// `I*(g)` for a bump `g`, in the range of the adjoint by construction.
    InRange { center: [f64; 2], radius: f64, amplitude: f64 },
    /// Constant function.
    Constant { value: f64 },
}

impl PsiDefinition {
    pub fn bump(center: [f64; 2], radius: f64) -> Self {
        PsiDefinition::Bump { center, radius, amplitude: 1.0 }
    }

    pub fn in_range(center: [f64; 2], radius: f64) -> Self {
        PsiDefinition::InRange { center, radius, amplitude: 1.0 }
    }

    /// Whether the functional is manufactured to lie in the range.
    pub fn expected_in_range(&self) -> Option<bool> {
        match self {
            PsiDefinition::InRange { .. } => Some(true),
            PsiDefinition::Bump { .. } => Some(false),
            PsiDefinition::Constant { .. } => None,
        }
    }

    pub fn realize(&self, ctx: &ScoreContext) -> Result<ScalarField> {
        let grid = ctx.grid();
        match *self {
            PsiDefinition::Bump { center, radius, amplitude } => {
                Bump::new(center, radius, amplitude).to_field(grid)
            }
            PsiDefinition::InRange { center, radius, amplitude } => {
                let g = Bump::new(center, radius, amplitude).to_field(grid)?;
                apply_i_sharp(ctx, &g)
            }
            PsiDefinition::Constant { value } => Ok(ScalarField::constant(grid, value)),
        }
    }

    /// Pointwise discretisation of the same functional, for evaluation along
    /// curves. In-range functionals use the adjoint formula
    /// `grad u . grad V g` rather than the exact discrete adjoint, whose
    /// values next to the origin ring are only first-order accurate.
    pub fn realize_pointwise(&self, ctx: &ScoreContext) -> Result<ScalarField> {
        match *self {
            PsiDefinition::InRange { center, radius, amplitude } => {
                let g = Bump::new(center, radius, amplitude).to_field(ctx.grid())?;
                apply_i_star(ctx, &g)
            }
            _ => self.realize(ctx),
        }
    }

    /// Analytic form, where one exists.
    pub fn analytic(&self) -> Option<Bump> {
        match *self {
            PsiDefinition::Bump { center, radius, amplitude } => Some(Bump::new(center, radius, amplitude)),
            _ => None,
        }
    }
}

/// A shipped `(fixture, psi)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiFixture {
    pub name: &'static str,
    pub fixture: Fixture,
    pub psi: PsiDefinition,
}

/// Every shipped functional fixture.
pub fn shipped_psi_fixtures() -> Vec<PsiFixture> {
    vec![
        PsiFixture {
            name: "square_bump",
            fixture: Fixture::SquareEx1,
            psi: PsiDefinition::bump([1.5, 1.5], 0.25),
        },
        PsiFixture {
            name: "square_in_range",
            fixture: Fixture::SquareEx1,
            psi: PsiDefinition::in_range([1.5, 1.5], 0.3),
        },
        PsiFixture {
            name: "disk_quadrant_bump",
            fixture: Fixture::DiskEx2,
            psi: PsiDefinition::bump([0.35, 0.35], 0.25),
        },
        PsiFixture {
            name: "disk_in_range",
            fixture: Fixture::DiskEx2,
            psi: PsiDefinition::in_range([0.3, -0.2], 0.35),
        },
        PsiFixture {
            name: "saddle_bump",
            fixture: Fixture::Saddle,
            psi: PsiDefinition::bump([0.5, 0.1], 0.2),
        },
    ]
}
