use std::path::PathBuf;

use clap::Parser;
use darwin_kinetics::cli::{main_with, Subcommand};

/// Matched runs of the Vlasov hierarchy and their convergence checks.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// run-vp, run-darwin, run-dvm, run-rvm, converge, rescale-check or integrals-selftest
    subcommand: Subcommand,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    let args = Args::parse();
    std::process::exit(main_with(args.subcommand, &args.config));
}
