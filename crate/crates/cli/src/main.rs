//! Config-driven experiment runner for the mean-field flow engine.

mod config;
mod manifest;
mod runner;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::SimConfig;
use runner::CliError;

#[derive(Parser)]
#[command(name = "mvflow", version, about = "Mean-field stochastic flow engine")]
struct Cli {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker count override (0 = all available)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward engine over the configured grid; emits the field time series
    Simulate,
    /// Forward run plus truncated inverse flow and two-sided residuals
    Invert,
    /// Inverse run plus domain masks at the configured times
    Domain,
    /// Nested-path self-convergence of the state endpoint
    Converge,
    /// Pathwise comparison against the closed-form Jacobian
    #[command(name = "oracle-check")]
    OracleCheck,
    /// Cross-method Wasserstein-2 agreement on random instances
    #[command(name = "w2-check")]
    W2Check,
    /// Derivative-bound probes for the configured coefficient family
    #[command(name = "probe-assumption")]
    ProbeAssumption,
}

fn load_config(cli: &Cli) -> Result<SimConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
            SimConfig::from_toml(&text).map_err(CliError::Validation)?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    cfg.validate().map_err(CliError::Validation)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out_root = PathBuf::from(&cfg.run.out_dir);
    let result = match cli.command {
        Command::Simulate => runner::run_simulate(&cfg, &out_root),
        Command::Invert => runner::run_invert(&cfg, &out_root),
        Command::Domain => runner::run_domain(&cfg, &out_root),
        Command::Converge => runner::run_converge(&cfg, &out_root),
        Command::OracleCheck => runner::run_oracle_check(&cfg, &out_root),
        Command::W2Check => runner::run_w2_check(&cfg, &out_root),
        Command::ProbeAssumption => runner::run_probe_assumption(&cfg, &out_root),
    };
    match result {
        Ok(counts) => {
            for (k, v) in &counts {
                if *v > 0 {
                    eprintln!("note: {k} = {v}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
