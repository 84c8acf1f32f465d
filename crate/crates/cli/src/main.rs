mod commands;
mod config;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use moie_core::datagen::Split;

use config::{RunConfig, SeedRange};

#[derive(Parser)]
#[command(name = "moie", version, about = "Carve a blackbox into interpretable experts and hunt shortcuts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (CSV plus JSON sidecar).
    Generate,
    /// Train the blackbox on the run's dataset.
    TrainBb,
    /// Carve the blackbox into experts and a residual.
    Carve {
        /// Generate data and train a blackbox first if none are saved.
        #[arg(long)]
        train_bb: bool,
    },
    /// Print local explanations for dataset rows.
    Explain {
        #[arg(required = true)]
        samples: Vec<usize>,
    },
    /// Detect, eliminate and verify shortcuts.
    Shortcut {
        /// Inclusive seed sweep, e.g. 0..4.
        #[arg(long, conflicts_with = "seed")]
        seeds: Option<SeedRange>,
        /// Skip elimination (for testing stage ordering).
        #[arg(long)]
        skip_eliminate: bool,
    },
    /// Evaluate a carved run on one split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_STAGE_ORDER: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<moie_core::Error>() {
            return match e {
                moie_core::Error::StageOrder(_) => EXIT_STAGE_ORDER,
                moie_core::Error::Degenerate(_) => EXIT_NUMERICAL,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

/// Thread pool for internal parallelism, capped by `MOIE_THREADS`.
fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MOIE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("MOIE_THREADS must be a positive integer, got `{v}`"))?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Generate => commands::cmd_generate(&cfg, cli.force),
        Command::TrainBb => commands::cmd_train_bb(&cfg, cli.force),
        Command::Carve { train_bb } => commands::cmd_carve(&cfg, cli.force, *train_bb),
        Command::Explain { samples } => commands::cmd_explain(&cfg, samples),
        Command::Shortcut { seeds, skip_eliminate } => {
            commands::cmd_shortcut(&cfg, seeds.map(SeedRange::seeds), cli.force, *skip_eliminate)
        }
        Command::Evaluate { split } => commands::cmd_evaluate(&cfg, *split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
