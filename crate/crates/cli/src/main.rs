use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynflow_cli::{commands, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dynflow", version, about = "Neural ODE solver experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the network, batch and benchmark seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and compare it with RK4.
    Solve(Common),
    /// Residual profile, error bound, δz estimates and the corrected dataset.
    ErrorAnalysis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fit a Koopman model to training snapshots.
    Koopman {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshots: PathBuf,
        /// Run one guarded Koopman step from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time residual, phased and Koopman-accelerated training.
    Benchmark(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(common) => {
            let (cfg, out) = load(&common)?;
            let s = commands::solve(&cfg, &out)?;
            println!(
                "{}: {} iterations ({:?}), loss {:?}, max error {:.3e}, bound {:?}",
                s.system, s.iterations, s.stop, s.final_loss, s.max_true_error, s.error_bound.bound
            );
        }
        Command::ErrorAnalysis { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let b = commands::error_analysis(&cfg, &checkpoint, &out)?;
            println!(
                "l_max {:.3e}, sigma_min {:.3e}, bound {:?}",
                b.l_max, b.sigma_min, b.bound
            );
        }
        Command::Koopman {
            common,
            snapshots,
            checkpoint,
        } => {
            let (cfg, out) = load(&common)?;
            let s = commands::koopman(&cfg, &snapshots, checkpoint.as_deref(), &out)?;
            println!(
                "rank {}, residual {:.3e}, converges {}",
                s.rank, s.residual, s.converges
            );
        }
        Command::Benchmark(common) => {
            let (cfg, out) = load(&common)?;
            let b = commands::benchmark(&cfg, &out)?;
            for leg in &b.legs {
                println!(
                    "{}: {} ({} iterations, {} F evals)",
                    leg.leg, leg.status, leg.iterations, leg.f_evals
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
