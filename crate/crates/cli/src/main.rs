mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::gradcheck::GradcheckArgs;
use commands::margins::MarginsArgs;
use commands::Common;

/// Margin-based softmax experiments on the unit hypersphere.
#[derive(Parser, Debug)]
#[command(name = "margin-forge", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pack k prototypes in R^d by Riesz-energy minimization.
    Riesz {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Jointly optimize free prototypes and features for each configured loss.
    Toy {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train an MLP on Gaussian blobs for each loss/regularizer in the grid.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Margin report for prototype, feature and label files.
    Margins(MarginsArgs),
    /// Compare every analytic loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Riesz { k, d, common } => commands::riesz::run(common, *k, *d),
        Cmd::Toy { k, d, common } => commands::toy::run(common, *k, *d),
        Cmd::Train { common } => commands::train::run(common),
        Cmd::Margins(args) => commands::margins::run(args),
        Cmd::Gradcheck(args) => commands::gradcheck::run(args),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("margin-forge: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
