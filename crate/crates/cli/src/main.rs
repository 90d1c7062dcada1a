//! `jclr`: command-line driver for the road/trajectory embedding pipeline.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Missing or malformed input files (exit 1).
    Input(String),
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Non-finite loss or failed gradient check (exit 3).
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Config(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<jclr::Error> for CliError {
    fn from(e: jclr::Error) -> Self {
        use jclr::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::BatchTooSmall(_) => CliError::Config(msg),
            E::NonFiniteLoss { .. } => CliError::Numerical(msg),
            _ => CliError::Input(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "jclr", version, about = "Road-segment and trajectory embeddings")]
struct Cli {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Stream per-step losses to stderr during training.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic city network and trajectory corpus.
    GenCity(Overrides),
    /// Count segment transitions and write the binarised adjacency.
    BuildTransition(Overrides),
    /// Compute route-similarity weights for every trajectory.
    ComputeRst(Overrides),
    /// Train the encoders and write the checkpoint and loss log.
    Train(Overrides),
    /// Export segment and trajectory embeddings as CSV.
    Embed(Overrides),
    /// Road-type classification probe.
    EvalRoadClf(Overrides),
    /// Segment speed regression probe.
    EvalSpeed(Overrides),
    /// Detour-query similarity search.
    EvalSimSearch(Overrides),
    /// Travel-time regression probe.
    EvalTte(Overrides),
    /// Finite-difference gradient check on random small instances.
    GradCheck(Overrides),
    /// Train and evaluate across a range of road-trajectory loss weights.
    SweepLambda(Overrides),
    /// Print the resolved configuration as TOML.
    ShowConfig(Overrides),
}

#[derive(clap::Args)]
struct Overrides {
    /// Dotted `section.key=value` settings applied over the config file.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = match &cli.command {
        Command::GenCity(o)
        | Command::BuildTransition(o)
        | Command::ComputeRst(o)
        | Command::Train(o)
        | Command::Embed(o)
        | Command::EvalRoadClf(o)
        | Command::EvalSpeed(o)
        | Command::EvalSimSearch(o)
        | Command::EvalTte(o)
        | Command::GradCheck(o)
        | Command::SweepLambda(o)
        | Command::ShowConfig(o) => &o.set,
    };
    let cfg = config::resolve(cli.config.as_deref(), overrides)?;
    if let Command::ShowConfig(_) = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    eprintln!("config {}", cfg.fingerprint());
    match cli.command {
        Command::GenCity(_) => commands::gen_city(&cfg),
        Command::BuildTransition(_) => commands::build_transition(&cfg),
        Command::ComputeRst(_) => commands::compute_rst(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg, cli.verbose),
        Command::Embed(_) => commands::embed(&cfg),
        Command::EvalRoadClf(_) => commands::eval_road_clf(&cfg),
        Command::EvalSpeed(_) => commands::eval_speed(&cfg),
        Command::EvalSimSearch(_) => commands::eval_sim_search(&cfg),
        Command::EvalTte(_) => commands::eval_tte(&cfg),
        Command::GradCheck(_) => commands::grad_check_cmd(&cfg),
        Command::SweepLambda(_) => commands::sweep_lambda(&cfg),
        Command::ShowConfig(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
