pub mod gradcheck;
pub mod margins;
pub mod riesz;
pub mod toy;
pub mod train;

use std::path::PathBuf;

use clap::Args;
use toml::Value;

use crate::config::{seed_from_env, Override};
use crate::error::CliError;

/// Options shared by the config-driven commands.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML config file; missing keys fall back to the command defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the config seed and MARGIN_FORGE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set optim.lr0=0.05` or `--set run.0.loss.s=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Concurrent grid entries (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Validate and write resolved_config.json without running.
    #[arg(long)]
    pub dry_run: bool,
    /// Exit with status 4 when the run misses its reference thresholds.
    #[arg(long = "assert")]
    pub assert: bool,
}

impl Common {
    /// Env seed, then `--set`, then `typed`, then `--seed`/`--output-dir`.
    pub fn overrides(&self, typed: Vec<Override>) -> Result<Vec<Override>, CliError> {
        let mut out: Vec<Override> = seed_from_env()?.into_iter().collect();
        for raw in &self.set {
            out.push(Override::parse(raw)?);
        }
        out.extend(typed);
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} exceeds i64::MAX")))?;
            out.push(Override::typed("seed", Value::Integer(seed)));
        }
        if let Some(dir) = &self.output_dir {
            out.push(Override::typed("output_dir", Value::String(dir.display().to_string())));
        }
        Ok(out)
    }
}

pub fn usize_override(key: &str, v: Option<usize>) -> Option<Override> {
    v.map(|v| Override::typed(key, Value::Integer(v as i64)))
}

/// Pairwise inner products of the rows, excluding the diagonal, as (min, max).
pub fn off_diagonal_range(w: &margin_forge::Matrix64) -> (f64, f64) {
    let g = margin_forge::geometry::gram(w);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            if i != j {
                range.0 = range.0.min(g.get(i, j));
                range.1 = range.1.max(g.get(i, j));
            }
        }
    }
    range
}
