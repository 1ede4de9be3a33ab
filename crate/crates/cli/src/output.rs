use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Core(margin_forge::Error::Io(format!("{}: {e}", path.display()))))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// `resolved_config.json`: the fully merged configuration actually run.
pub fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<(), CliError> {
    let value = serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_json(&dir.join("resolved_config.json"), &value)
}

/// Thread pool for grid entries; `None` or 0 uses every core.
pub fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}
