//! Layered run settings: CLI flag > config file > `COLFLUX_SEED` (seed only) > built-in.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use colflux_core::column::{ColumnParams, NoiseSpec};
use colflux_core::mpc::OcpConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "COLFLUX_SEED";
pub const DEFAULT_SEED: u64 = 1;

/// Optional overrides read from a JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub column: Option<ColumnParams<f64>>,
    pub noise: Option<NoiseSpec>,
    pub mpc: Option<OcpConfig>,
    pub h: Option<f64>,
    pub events: Option<usize>,
    pub bias_draws: Option<usize>,
    pub envelope_draws: Option<usize>,
    pub record_every: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Fully resolved settings, recorded verbatim in every manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub column: ColumnParams<f64>,
    pub noise: NoiseSpec,
    pub mpc: OcpConfig,
    /// Plant integration step, min.
    pub h: f64,
    /// Number of disturbance events per generated sequence.
    pub events: usize,
    pub bias_draws: usize,
    pub envelope_draws: usize,
    /// Keep every n-th grid point in written trajectories.
    pub record_every: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn pick<T>(cli: Option<T>, file: Option<T>, env: Option<T>, builtin: T) -> T {
    cli.or(file).or(env).unwrap_or(builtin)
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

impl Settings {
    pub fn resolve(file: &FileConfig, cli_seed: Option<u64>, env_seed: Option<u64>) -> Self {
        let column = file.column.clone().unwrap_or_default();
        Settings {
            seed: pick(cli_seed, file.seed, env_seed, DEFAULT_SEED),
            noise: file.noise.unwrap_or_else(|| NoiseSpec::for_column(&column)),
            column,
            mpc: file.mpc.unwrap_or_default(),
            h: file.h.unwrap_or(0.005),
            events: file.events.unwrap_or(100),
            bias_draws: file.bias_draws.unwrap_or(10),
            envelope_draws: file.envelope_draws.unwrap_or(100),
            record_every: file.record_every.unwrap_or(20),
            lambda1: file.lambda1.unwrap_or(0.01),
            lambda2: file.lambda2.unwrap_or(0.99),
        }
    }
}
