mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::output::{timestamped_dir, Outputs};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<latent_dr::Error> for Failure {
    fn from(e: latent_dr::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latent-dr", version, about = "Doubly robust estimation with latent confounders")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Result directory; must be absent or empty. Defaults to a timestamped directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "LATENT_DR_THREADS")]
    threads: Option<usize>,
    /// Replaces the `seed` in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Counterfactual means, effects, distributions and dominance tests.
    Estimate,
    /// Neighborhood size selection by cross-validation or plug-in.
    Tune,
    /// Matching discrepancy and local eigenvalue diagnostics.
    Diagnose,
    /// Monte Carlo experiments.
    Simulate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Tune => "tune",
            Command::Diagnose => "diagnose",
            Command::Simulate => "simulate",
        }
    }
}

fn run(cli: &Cli) -> Result<PathBuf, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Data("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads.or(cfg.threads) {
        if n == 0 {
            return Err(Failure::Data("thread count must be positive".into()));
        }
        // Fails only if the pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let target = match &cli.out {
        Some(p) => p.clone(),
        None => {
            let root = cfg.output_root.clone().unwrap_or_else(|| PathBuf::from("results"));
            timestamped_dir(&root, cli.command.name())
        }
    };
    let mut outputs: Outputs = match cli.command {
        Command::Estimate => commands::estimate(&cfg)?,
        Command::Tune => commands::tune(&cfg)?,
        Command::Diagnose => commands::diagnose(&cfg)?,
        Command::Simulate => commands::simulate(&cfg)?,
    };
    let echo = toml::to_string(&cfg).map_err(|e| Failure::Data(format!("cannot serialize config: {e}")))?;
    outputs.add("config.toml", echo);
    log::info!("writing {} to {}", outputs.names().collect::<Vec<_>>().join(", "), target.display());
    outputs.commit(&target)?;
    Ok(target)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
