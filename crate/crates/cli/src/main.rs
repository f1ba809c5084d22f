use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdc_core::jdan::CouplingMode;

mod commands;
mod config;

use config::{ConfigError, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "mdc",
    version,
    about = "Multivariate density forecasts of flowgate security margins"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration, JSON or TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[arg(long, global = true, value_parser = parse_coupling)]
    coupling: Option<CouplingMode>,

    /// Monte-Carlo samples for the security index cross-check.
    #[arg(long, global = true)]
    mc: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic series, manifest and oracle.
    Generate,
    /// Train a forecaster.
    Train,
    /// Emit conditional densities and quantiles for test windows.
    Forecast,
    /// Reliability of the model and baselines on the test split.
    Evaluate,
    /// Security index for test windows.
    Index,
    /// Train every grid point and keep the best.
    GridSearch,
}

fn parse_coupling(s: &str) -> Result<CouplingMode, String> {
    s.parse().map_err(|e: mdc_core::Error| e.to_string())
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        if let Some(synth) = cfg.data.synth.as_mut() {
            synth.seed = s;
        }
    }
    if let Some(c) = cli.coupling {
        cfg.arch.coupling = c;
        if c == CouplingMode::PaperLiteral {
            cfg.arch.n_components = 1;
        }
    }
    if let Some(n) = cli.mc {
        cfg.index.mc_samples = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    mdc_core::par::with_threads(cli.jobs, || match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Forecast => commands::forecast(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Index => commands::index(&cfg),
        Command::GridSearch => commands::grid(&cfg),
    })
}

/// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<mdc_core::Error>() {
            return match err {
                e if e.is_numeric() => 3,
                mdc_core::Error::InvalidArgument(_)
                | mdc_core::Error::Shape { .. }
                | mdc_core::Error::Json(_)
                | mdc_core::Error::Csv(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
