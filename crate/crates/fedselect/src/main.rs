use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedselect::experiment::{self, inspect_gradltn, leg_dir_name, run_sweep};
use fedselect::output::OutputDir;
use fedselect::{ExperimentConfig, Overrides, ParallelExecutor, RunError};

#[derive(Parser)]
#[command(name = "fedselect", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the personalization rate.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Run FedSelect once per personalization rate on the same clients.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated personalization rates.
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
    },
    /// Run one client's subnetwork search and print how the mask shrinks.
    InspectGradltn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        client: usize,
        /// Overrides the personalization rate.
        #[arg(long)]
        p: Option<f64>,
    },
}

fn load(common: &Common, p: Option<f64>) -> Result<(ExperimentConfig, Vec<&'static str>), RunError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let changed = cfg.apply(&Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
        personalization_rate: p,
    });
    cfg.validate()?;
    Ok((cfg, changed))
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { common, p } => {
            let (cfg, changed) = load(&common, p)?;
            let exec = ParallelExecutor::from_env()?;
            let outcome = experiment::run_experiment(&cfg, &exec)?;
            let dir = OutputDir::create(&cfg.output_dir)?;
            let summary = experiment::write_outputs(&dir, &outcome, &changed)?;
            println!(
                "{}: {} rounds, final mean accuracy {:.4}, {} bytes up",
                summary.label, summary.rounds, summary.final_mean_accuracy, summary.total_bytes_up
            );
            println!("wrote {}", dir.root().display());
        }
        Command::Sweep { common, p } => {
            let (cfg, changed) = load(&common, None)?;
            let exec = ParallelExecutor::from_env()?;
            let legs = run_sweep(&cfg, &p, &changed, &exec)?;
            println!("{:>8}  {:>14}  {:>16}", "p", "final accuracy", "bytes up/round");
            for leg in &legs {
                println!(
                    "{:>8}  {:>14.4}  {:>16.1}   {}",
                    leg.p,
                    leg.summary.final_mean_accuracy,
                    leg.summary.mean_bytes_up_per_round,
                    leg_dir_name(leg.p)
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::InspectGradltn { common, client, p } => {
            let (cfg, _) = load(&common, p)?;
            println!("{}", inspect_gradltn(&cfg, client)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
