use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dso_cli::{execute, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dso", version, about = "Optimize parameterized Markov chains and check their gradients")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rollout generation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Compare the exact gradient with finite differences.
    GradCheck,
    /// Run an optimizer and write its learning curve.
    Optimize,
    /// Check that the action-free constructions reproduce the MDP they encode.
    Equiv,
    /// Learn the desirability of a gridworld by stochastic approximation.
    Zlearn,
}

fn run(args: &Args) -> anyhow::Result<bool> {
    let path = args.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()).into());
    }
    let command = match args.command {
        Cmd::GradCheck => Command::GradCheck,
        Cmd::Optimize => Command::Optimize,
        Cmd::Equiv => Command::Equiv,
        Cmd::Zlearn => Command::Zlearn,
    };
    let passed = execute(command, &config, args.out.as_deref(), args.threads)
        .with_context(|| format!("running {}", path.display()))?;
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(3, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
