//! `htlab`: command-line driver for the htransform laboratory.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use config::RunConfig;
use failure::{Failure, EXIT_CHECK, EXIT_OK};

#[derive(Parser, Debug)]
#[command(name = "htlab", version, about = "Generalized h-transforms of reversible Markov processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte Carlo batches.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build and validate the reversible model.
    Model,
    /// Solve for the Feynman-Kac pair (g, f).
    Fk,
    /// Build the h-process: marginals, jump kernel and relative entropy.
    Transform,
    /// Sample paths of the transformed or the reference process.
    Sample,
    /// Residual checks of the generator identities, semigroup and Orlicz bounds.
    Check,
    /// Discrete HJB residual of log g.
    Hjb,
    /// Schrödinger bridge by iterative proportional fitting.
    Bridge,
    /// One-dimensional diffusion pipeline.
    Diffusion,
    /// Run every applicable check and aggregate the verdicts.
    Report,
}

fn run(cli: &Cli) -> Result<Vec<commands::CheckLine>, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::validation("missing_config", "--config is required"))?;
    let cfg = RunConfig::load(path)?;
    std::fs::create_dir_all(&cli.out)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::validation("invalid_input", e.to_string()))?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Model => commands::model(&cfg, out),
        Command::Fk => commands::fk(&cfg, out),
        Command::Transform => commands::transform(&cfg, out),
        Command::Sample => commands::sample(&cfg, out),
        Command::Check => commands::check(&cfg, out),
        Command::Hjb => commands::hjb(&cfg, out),
        Command::Bridge => commands::bridge(&cfg, out),
        Command::Diffusion => commands::diffusion(&cfg, out),
        Command::Report => commands::report(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .init();
    match run(&cli) {
        Ok(lines) => {
            for l in &lines {
                println!("{}", l.render());
            }
            let failed = lines.iter().filter(|l| !l.passed()).count();
            if failed > 0 {
                eprintln!("error: {}", Failure::check(format!("{failed} of {} checks failed", lines.len())));
                ExitCode::from(EXIT_CHECK)
            } else {
                ExitCode::from(EXIT_OK)
            }
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
