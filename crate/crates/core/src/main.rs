use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use divinfo::config::{shipped_psi, ExperimentConfig};
use divinfo::experiments::{run, Artifacts, Experiment};
use divinfo::fixtures::Fixture;
use divinfo::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "divinfo", version, about = "Information geometry of the divergence-form inverse problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    fixture: Option<Fixture>,

    /// Shipped functional by name (e.g. square_bump, disk_in_range).
    #[arg(long, global = true)]
    psi: Option<String>,

    /// Grid resolutions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    resolution: Vec<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default `out/<subcommand>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Forward Dirichlet solves.
    Solve,
    /// Linearisation order, adjoint defect and stability floor.
    VerifyOperators,
    /// Eigenvalues of the information operator and the range series.
    Spectrum,
    /// Efficient information across a refinement sweep.
    Fisher,
    /// Range verdict from integral curves.
    Transport,
    /// LAN, information identity and plug-in risk Monte Carlo.
    Simulate,
    /// Degeneracy of the efficient information for a bump functional.
    #[command(name = "reproduce-thm37")]
    ReproduceThm37,
    /// Transport obstruction and agreement with the spectral verdict.
    #[command(name = "reproduce-thm38")]
    ReproduceThm38,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Solve => Experiment::Solve,
            Command::VerifyOperators => Experiment::VerifyOperators,
            Command::Spectrum => Experiment::Spectrum,
            Command::Fisher => Experiment::Fisher,
            Command::Transport => Experiment::Transport,
            Command::Simulate => Experiment::Simulate,
            Command::ReproduceThm37 => Experiment::Degeneracy,
            Command::ReproduceThm38 => Experiment::Obstruction,
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_fixture(cli.fixture.unwrap_or(Fixture::SquareEx1)),
    };
    if let Some(f) = cli.fixture {
        cfg.set_fixture(f);
    }
    if let Some(name) = &cli.psi {
        let (fixture, psi) = shipped_psi(name)?;
        if fixture != cfg.fixture {
            return Err(Error::Config(format!("functional `{name}` belongs to {fixture}, not {}", cfg.fixture)));
        }
        cfg.psi = Some(psi);
    }
    if !cli.resolution.is_empty() {
        cfg.resolutions = cli.resolution.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes everything into a staging directory and moves it into place.
fn write_artifacts(dir: &Path, experiment: Experiment, cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    let mut files: Vec<(String, Vec<u8>)> =
        art.tables.iter().map(|t| (t.name.clone(), t.contents.clone().into_bytes())).collect();
    let mut summary = serde_json::to_vec_pretty(&art.summary)?;
    summary.push(b'\n');
    files.push(("summary.json".into(), summary));
    files.push(("config.toml".into(), cfg.to_toml()?.into_bytes()));
    let listing: Vec<_> = files.iter().map(|(n, b)| json!({ "name": n, "sha256": sha256_hex(b) })).collect();
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut seeds = vec![cfg.seed];
    seeds.extend(art.seeds.iter().filter(|&&s| s != cfg.seed));
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": experiment.name(),
        "fixture": cfg.fixture,
        "resolutions": cfg.resolutions,
        "config_hash": cfg.hash()?,
        "seeds": seeds,
        "timestamp_unix": timestamp,
        "files": listing,
    });
    files.push(("manifest.json".into(), serde_json::to_vec_pretty(&manifest)?));

    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let result = (|| -> Result<()> {
        fs::create_dir_all(&staging)?;
        for (n, b) in &files {
            fs::write(staging.join(n), b)?;
        }
        if dir.exists() {
            fs::create_dir_all(dir)?;
            for (n, _) in &files {
                fs::rename(staging.join(n), dir.join(n))?;
            }
            fs::remove_dir(&staging)?;
        } else {
            fs::rename(&staging, dir)?;
        }
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let experiment = Experiment::from(cli.command);
    let cfg = build_config(cli)?;
    let artifacts = run(experiment, &cfg)?;
    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    write_artifacts(&dir, experiment, &cfg, &artifacts)?;
    Ok(dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({
                "status": "error",
                "subcommand": Experiment::from(cli.command).name(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
