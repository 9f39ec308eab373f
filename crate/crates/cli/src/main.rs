use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfl::experiment::{run_experiment, ExperimentConfig, ExperimentSummary};
use dfl::federation::Execution;
use dfl::Error;

#[derive(Parser)]
#[command(name = "dfl", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm of an experiment file for every seed.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment TOML file.
    config: PathBuf,
    /// Output directory for metrics, summary and plot.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace the configured seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run only these arms, e.g. `dfl,fedavg`.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    /// Worker threads for per-client training.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Train clients one after another on the main thread.
    #[arg(long)]
    single_thread: bool,
}

fn run(args: &RunArgs) -> dfl::Result<ExperimentSummary> {
    let config = ExperimentConfig::load(&args.config)?;
    let mut plan = config.plan()?;
    if let Some(seeds) = &args.seeds {
        plan.set_seeds(seeds.clone())?;
    }
    if let Some(arms) = &args.arms {
        plan.select_arms(arms)?;
    }
    let exec = Execution {
        threads: args.threads.map(|t| t as usize),
        single_thread: args.single_thread,
    };
    run_experiment(&config, &plan, &args.out, exec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Command::Run(args) = cli.command;
    match run(&args) {
        Ok(summary) => {
            for a in &summary.arms {
                println!("{:<24} median final accuracy {:.4}", a.arm, a.median_final_acc);
            }
            for d in &summary.skew_deltas {
                println!("{:<24} skew degradation {:+.2} points", d.arm, d.degradation_points);
            }
            for c in &summary.convex {
                println!("convex seed {:<12} final |grad f| {:.3e}", c.seed, c.final_grad_norm);
            }
            println!("wrote {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
