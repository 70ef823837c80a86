use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bilevel_coreset::experiment::{run_experiment, ExperimentConfig};
use clap::Parser;

/// Runs a coreset selection experiment described by a JSON config and
/// writes long-format results, a summary and plot series to the output
/// directory.
#[derive(Debug, Parser)]
#[command(name = "summarize", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Log progress per cell.
    #[arg(long, short)]
    verbose: bool,
}

fn run(args: &Args) -> anyhow::Result<bool> {
    let mut cfg = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let table = run_experiment(&cfg)?;
    let written = table.write_all(&args.out, &cfg.output.csv, &cfg.output.summary, &cfg.output.plots)?;
    for path in &written {
        log::info!("wrote {}", path.display());
    }
    for f in &table.failures {
        eprintln!("failed: {} size {} seed {}: {}", f.method, f.size, f.seed, f.error);
    }
    Ok(table.failures.is_empty())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
