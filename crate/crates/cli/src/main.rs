use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{Overrides, RunConfig};

/// Semantic navigation cost learning: data, training, evaluation and plots.
#[derive(Parser)]
#[command(name = "semnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test demonstration sets.
    GenData(Common),
    /// Train the map encoder and cost network.
    Train(Common),
    /// NLL, accuracy, success rate and Hausdorff distance on held-out sets.
    Eval(Common),
    /// Per-step latency of A* against full value iteration.
    Bench(Common),
    /// Posterior, cost, subgradient and rollout images for one episode.
    Inspect(Common),
    /// Hard-min vs soft-min value iteration on the bordered empty grid.
    PolicyLab(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Training episodes; validation and test get a fifth each.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Boltzmann temperature.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model file (eval, bench, inspect) or training state to resume (train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let o = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            grid_size: self.grid_size,
            episodes: self.episodes,
            epochs: self.epochs,
            alpha: self.alpha,
            lr: self.lr,
            checkpoint: self.checkpoint.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval(c) => commands::eval(&c.resolve()?),
        Command::Bench(c) => commands::bench(&c.resolve()?),
        Command::Inspect(c) => commands::inspect(&c.resolve()?),
        Command::PolicyLab(c) => commands::policy_lab(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
