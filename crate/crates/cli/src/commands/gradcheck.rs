use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use margin_forge::losses::gradcheck_sweep;

use crate::error::CliError;
use crate::output::write_text;

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    /// Random problems per loss kind.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write gradcheck.csv here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Flip the sign of one analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

pub fn run(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.instances == 0 {
        return Err(CliError::Config("--instances must be >= 1".into()));
    }
    let rows = gradcheck_sweep(args.instances, args.seed, args.inject_sign_error)?;
    let mut csv = String::from("name,instances,max_rel_error,tolerance,passed\n");
    println!("{:<28} {:>9} {:>14} {:>10}  result", "loss", "instances", "max rel err", "tolerance");
    for r in &rows {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<28} {:>9} {:>14.3e} {:>10.0e}  {verdict}", r.name, r.instances, r.max_rel_error, r.tolerance);
        let _ = writeln!(csv, "{},{},{},{},{}", r.name, r.instances, r.max_rel_error, r.tolerance, r.passed());
    }
    if let Some(dir) = &args.output_dir {
        write_text(&dir.join("gradcheck.csv"), &csv)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assert(format!("gradient check failed for {}", failed.join(", "))))
    }
}
