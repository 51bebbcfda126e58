use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use freeadv::harness::config::ExperimentConfig;
use freeadv::harness::experiment::{
    check_manifest, eval_checkpoint, output_dir_for, run_experiment, surface_checkpoint,
};
use freeadv::{Error, Result};

/// Free adversarial training engine.
#[derive(Parser)]
#[command(name = "freeadv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write all artifacts for a config.
    Run { config: PathBuf },
    /// Re-evaluate a checkpoint with a config's attacks.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Compute loss surfaces for a checkpoint.
    Surface { checkpoint: PathBuf, config: PathBuf },
    /// Re-check the cost ledger recorded in a manifest.
    Ledger { manifest: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let run = run_experiment(&config)?;
            print!("{}", run.report.to_csv());
            println!("artifacts: {}", run.output_dir.display());
        }
        Command::Eval { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = eval_checkpoint(&cfg, &checkpoint, &output_dir_for(&cfg))?;
            print!("{}", report.to_csv());
        }
        Command::Surface { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = surface_checkpoint(&cfg, &checkpoint, &output_dir_for(&cfg))?;
            println!(
                "examples={} center={} adversarial={} rademacher={}",
                s.examples, s.mean_center, s.mean_adversarial, s.mean_rademacher
            );
        }
        Command::Ledger { manifest } => {
            let r = check_manifest(&manifest)?;
            println!(
                "ok regime={} k_or_m={} updates={} forward={} backward={} sgd_update={}",
                r.regime.name(),
                r.k_or_m,
                r.updates,
                r.ledger.forward,
                r.ledger.backward,
                r.ledger.sgd_update
            );
        }
    }
    Ok(())
}

fn one_line(err: &Error) -> String {
    err.to_string().replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error kind={} msg={}", err.kind(), one_line(&err));
            ExitCode::FAILURE
        }
    }
}
