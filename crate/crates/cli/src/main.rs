//! `csmoe` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
}

#[derive(Debug, Parser)]
#[command(name = "csmoe", version, about = "Cross-sensor soft-MoE masked autoencoder toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (JSON). A bare model config is accepted too.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "CSMOE_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select a dispersed training subset from an archive.
    Sample(commands::SampleArgs),
    /// Cut a large tile into fixed-size patches.
    SplitTiles(commands::SplitArgs),
    /// Pretrain on paired images at toy scale.
    PretrainToy(commands::PretrainArgs),
    /// Compare tape gradients of the full loss with finite differences.
    GradCheck(commands::GradCheckArgs),
    /// Score uni- or cross-modal retrieval.
    EvalRetrieval(commands::RetrievalArgs),
    /// Count parameters and forward flops.
    Flops(commands::FlopsArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Check(_) => 2,
        };
    }
    match err.downcast_ref::<csmoe::error::Error>() {
        Some(csmoe::error::Error::Config(_) | csmoe::error::Error::Parameter(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => commands::default_config(cli.command.as_ref()),
    };
    let cfg = commands::apply_overrides(base, cli.command.as_ref()).resolve(g.seed)?;
    if g.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()).into());
    };
    commands::dispatch(command, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
