//! `sentadapt` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration or input.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<sentadapt::Error> for Failure {
    fn from(e: sentadapt::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "sentadapt", version, about = "Domain-adapted sentence encoders for few-shot classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact store root (else config, else $SENTADAPT_STORE, else ./store).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Results directory (default: `results/` beside the store).
    #[arg(long, global = true)]
    pub results: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Domain-adaptive pre-training on a dataset's unlabelled text.
    Dapt(commands::DaptArgs),
    /// Sentence-embedding pre-training on sentence pairs.
    Sept(commands::SeptArgs),
    /// Compose a strategy's encoder from stored artifacts.
    Assemble(commands::AssembleArgs),
    /// Few-shot contrastive fine-tuning plus a logistic head.
    Setfit(commands::SetfitArgs),
    /// Pseudo-label unlabelled text and refit a trained head.
    Selftrain(commands::SelftrainArgs),
    /// Evaluate one model, or run a strategy x dataset x seed matrix.
    Eval(commands::EvalArgs),
    /// Aggregate tables and the training-cost report from stored results.
    Report(commands::ReportArgs),
    /// Write a synthetic labelled corpus and pair file.
    Synth(commands::SynthArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = commands::resolve(&cli.common)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Dapt(a) => commands::dapt(cfg, a),
        Command::Sept(a) => commands::sept(cfg, a),
        Command::Assemble(a) => commands::assemble(cfg, a),
        Command::Setfit(a) => commands::setfit(cfg, a),
        Command::Selftrain(a) => commands::selftrain(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Report(a) => commands::report(cfg, a),
        Command::Synth(a) => commands::synth(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Usage(String::new()).code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sentadapt: {f}");
            ExitCode::from(f.code())
        }
    }
}
