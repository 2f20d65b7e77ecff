//! Experiment configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elliptic::SolverOptions;
use crate::error::{Error, Result};
use crate::fixtures::{shipped_psi_fixtures, Fixture, PsiDefinition, ThetaDefinition};
use crate::grid::{build_grid, Bump};
use crate::regression::EstimatorConfig;
use crate::spectral::FisherMethod;
use crate::transport::{SeedStrategy, TraceOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub solver: SolverOptions,
    pub trace: TraceOptions,
    /// Identifiability check `Delta u + mu |grad u|^2 > c0`.
    pub mu: f64,
    pub c0: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { solver: SolverOptions::default(), trace: TraceOptions::default(), mu: 1.0, c0: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub method: FisherMethod,
    /// Eigenpairs computed when the grid is too large for a full decomposition.
    pub top_k: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { method: FisherMethod::DirectSolve, top_k: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub seeds: SeedStrategy,
    /// Grid used by the transport side of `reproduce-thm38`; `None` picks
    /// 33 on the square and 64 on the disk.
    pub resolution: Option<usize>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { seeds: SeedStrategy::default(), resolution: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub lan_sample_size: usize,
    pub lan_replicates: usize,
    /// Perturbation direction for the LAN study; `None` uses the fixture default.
    pub lan_direction: Option<Bump>,
    pub identity_sample_size: usize,
    pub risk_sample_sizes: Vec<usize>,
    pub risk_replicates: usize,
    pub estimator: EstimatorConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            lan_sample_size: 10_000,
            lan_replicates: 2000,
            lan_direction: None,
            identity_sample_size: 100_000,
            risk_sample_sizes: vec![500, 2000, 8000],
            risk_replicates: 200,
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fixture: Fixture,
    #[serde(default)]
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub psi: Option<PsiDefinition>,
    #[serde(default)]
    pub theta: ThetaDefinition,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

fn default_seed() -> u64 {
    20240501
}

impl ExperimentConfig {
    /// Defaults for a fixture, with its shipped bump functional.
    pub fn for_fixture(fixture: Fixture) -> Self {
        Self {
            fixture,
            resolutions: Vec::new(),
            psi: None,
            theta: ThetaDefinition::default(),
            seed: default_seed(),
            output: None,
            tolerances: Tolerances::default(),
            spectral: SpectralConfig::default(),
            transport: TransportConfig::default(),
            simulation: SimulationConfig::default(),
        }
        .resolved()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills unset resolutions, functional and LAN direction from the fixture.
    pub fn resolved(mut self) -> Self {
        if self.resolutions.is_empty() {
            self.resolutions = default_resolutions(self.fixture);
        }
        if self.psi.is_none() {
            self.psi = Some(default_psi(self.fixture));
        }
        if self.simulation.lan_direction.is_none() {
            self.simulation.lan_direction = Some(default_lan_direction(self.fixture));
        }
        self
    }

    /// Changes the fixture, resetting fixture-dependent defaults.
    pub fn set_fixture(&mut self, fixture: Fixture) {
        if fixture != self.fixture {
            self.fixture = fixture;
            self.resolutions.clear();
            self.psi = None;
            self.simulation.lan_direction = None;
            self.transport.resolution = None;
            *self = self.clone().resolved();
        }
    }

    pub fn psi(&self) -> PsiDefinition {
        self.psi.clone().unwrap_or_else(|| default_psi(self.fixture))
    }

    pub fn transport_resolution(&self) -> usize {
        self.transport.resolution.unwrap_or(match self.fixture {
            Fixture::SquareEx1 => 33,
            Fixture::DiskEx2 | Fixture::Saddle => 64,
        })
    }

    /// Checks that the functional and the conductivity can be sampled on
    /// every requested grid.
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("no resolutions".into()));
        }
        if let Some(w) = self.resolutions.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("resolutions must increase, got {} then {}", w[0], w[1])));
        }
        for &n in &self.resolutions {
            let grid = build_grid(self.fixture.domain(n))?;
            self.theta.realize(&grid)?;
            let bump = match self.psi() {
                PsiDefinition::Bump { center, radius, amplitude }
                | PsiDefinition::InRange { center, radius, amplitude } => Some(Bump::new(center, radius, amplitude)),
                PsiDefinition::Constant { .. } => None,
            };
            if let Some(b) = bump {
                b.to_field(&grid).map_err(|e| {
                    Error::Config(format!("functional does not fit the {} fixture: {e}", self.fixture))
                })?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, minus the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = None;
        let bytes = serde_json::to_vec(&c)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn default_resolutions(fixture: Fixture) -> Vec<usize> {
    match fixture {
        Fixture::SquareEx1 => vec![17, 33, 65],
        Fixture::DiskEx2 | Fixture::Saddle => vec![8, 16, 32],
    }
}

/// The first shipped bump functional of the fixture.
pub fn default_psi(fixture: Fixture) -> PsiDefinition {
    shipped_psi_fixtures()
        .into_iter()
        .find(|f| f.fixture == fixture && f.psi.expected_in_range() == Some(false))
        .map(|f| f.psi)
        .unwrap_or(PsiDefinition::Constant { value: 1.0 })
}

pub fn default_lan_direction(fixture: Fixture) -> Bump {
    match fixture {
        Fixture::SquareEx1 => Bump::new([1.5, 1.5], 0.3, 10.0),
        Fixture::DiskEx2 | Fixture::Saddle => Bump::new([0.2, 0.1], 0.3, 10.0),
    }
}

/// Looks up a shipped functional by name.
pub fn shipped_psi(name: &str) -> Result<(Fixture, PsiDefinition)> {
    shipped_psi_fixtures()
        .into_iter()
        .find(|f| f.name == name)
        .map(|f| (f.fixture, f.psi))
        .ok_or_else(|| Error::Config(format!("unknown functional `{name}`")))
}
