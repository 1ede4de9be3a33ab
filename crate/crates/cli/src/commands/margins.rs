use std::path::{Path, PathBuf};

use clap::Args;

use margin_forge::io::{read_labels, read_matrix};
use margin_forge::margins::DEFAULT_THRESHOLDS;
use margin_forge::MarginReport;

use crate::error::CliError;
use crate::output::write_json;

#[derive(Args, Clone, Debug)]
pub struct MarginsArgs {
    /// k x d prototype CSV.
    #[arg(long)]
    pub protos: PathBuf,
    /// N x d feature CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// One label per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Take sample margins on row-normalized prototypes and features.
    #[arg(long)]
    pub normalize: bool,
    /// Also write margins.json here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

pub fn report(protos: &Path, features: &Path, labels: &Path, normalize: bool) -> Result<MarginReport<f64>, CliError> {
    let w = read_matrix::<f64>(protos)?;
    let z = read_matrix::<f64>(features)?;
    let y = read_labels(labels)?;
    Ok(MarginReport::compute(&w, &z, &y, &DEFAULT_THRESHOLDS, normalize)?)
}

pub fn run(args: &MarginsArgs) -> Result<(), CliError> {
    let rep = report(&args.protos, &args.features, &args.labels, args.normalize)?;
    let json = rep.to_json();
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    if let Some(dir) = &args.output_dir {
        write_json(&dir.join("margins.json"), &json)?;
    }
    Ok(())
}
