//! `pcrl`: train, evaluate, ablate, gradient-check, and export.

mod ablation;
mod evaluate;
mod export;
mod gradcheck;
mod output;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pcrl::rl::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pcrl", version, about = "Point-cloud reinforcement learning for active target search")]
pub struct Cli {
    /// TOML file with [env] and [trainer] tables.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "pcrl-out")]
    pub out: PathBuf,
    /// Evaluation worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a learned agent and write metrics, checkpoints and a trace.
    Train(train::Args),
    /// Run agents over a shared set of seeded episodes.
    Evaluate(evaluate::Args),
    /// Train several architectures under one budget and seed set.
    Ablation(ablation::Args),
    /// Finite-difference checks of every differentiable block.
    Gradcheck(gradcheck::Args),
    /// Turn recorded traces into PLY snapshots and CSV files.
    Export(export::Args),
}

/// Bad invocation or configuration: exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check that ran but did not meet its tolerance: exit status 1.
#[derive(Debug)]
pub struct ToleranceFailure(pub String);

impl std::fmt::Display for ToleranceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ToleranceFailure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Loads `--config` if given, else returns `default`.
pub fn load_run(path: Option<&Path>, default: RunConfig) -> Result<RunConfig> {
    match path {
        None => Ok(default),
        Some(p) if !p.exists() => Err(usage(format!("config file not found: {}", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string())),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<pcrl::Error>() {
        Some(pcrl::Error::Config(_) | pcrl::Error::Parse { .. } | pcrl::Error::Argument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train::run(&cli, a),
        Command::Evaluate(a) => evaluate::run(&cli, a),
        Command::Ablation(a) => ablation::run(&cli, a),
        Command::Gradcheck(a) => gradcheck::run(&cli, a),
        Command::Export(a) => export::run(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
