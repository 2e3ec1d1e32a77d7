//! `rta <verb> --config run.toml [section.key=value ...]`
//!
//! Every verb reads one TOML config, applies the overrides, and writes its
//! outputs plus `config.resolved.toml` into a fresh run directory named
//! `{verb}-{timestamp}-{config hash}` under `run.out_root`.

pub mod alloc_probe;
mod bench;
pub mod config;
mod rundir;
mod verbs;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use serde_json::json;

pub use bench::{bench_latency, BenchReport, ThreadReport};
pub use config::RunConfig;
pub use rundir::{create_run_dir, latest_run_dir, RESOLVED_CONFIG};
use rta_core::RtaError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or config: nothing has been written.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] RtaError),
    #[error(transparent)]
    Serve(#[from] rta_serve::ServeError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) | CliError::Serve(rta_serve::ServeError::Core(e)) => match e {
                RtaError::Ingest { .. } => "ingest",
                RtaError::Io { .. } => "io",
                RtaError::Format { .. } => "format",
                RtaError::Config(_) => "config",
                RtaError::NonFiniteLoss { .. } => "non_finite_loss",
                RtaError::StaleArtifact(_) => "stale_artifact",
                _ => "runtime",
            },
            CliError::Serve(_) => "serve",
        }
    }

    /// The one-line JSON written to stderr on failure.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code()}).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    Ingest,
    WrmfInit,
    Train,
    Precompute,
    Evaluate,
    Serve,
    BenchLatency,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Ingest => "ingest",
            Verb::WrmfInit => "wrmf-init",
            Verb::Train => "train",
            Verb::Precompute => "precompute",
            Verb::Evaluate => "evaluate",
            Verb::Serve => "serve",
            Verb::BenchLatency => "bench-latency",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rta", version, about = "Represent-then-aggregate playlist continuation")]
pub struct Cli {
    #[arg(value_enum)]
    pub verb: Verb,
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// `train` only: continue the latest run with the same resolved config.
    #[arg(long)]
    pub resume: bool,
    /// `train` only: stop after this epoch, as if interrupted.
    #[arg(long, hide = true)]
    pub stop_after_epoch: Option<usize>,
    /// `section.key=value` overrides, applied in order.
    pub overrides: Vec<String>,
}

/// What a successful verb reports on the last line of stdout. File names in
/// `summary` are relative to `run_dir`.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub verb: Verb,
    pub run_dir: PathBuf,
    pub summary: serde_json::Value,
}

impl Outcome {
    pub fn to_json(&self) -> String {
        json!({"verb": self.verb.name(), "run_dir": self.run_dir, "summary": self.summary}).to_string()
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    if (cli.resume || cli.stop_after_epoch.is_some()) && cli.verb != Verb::Train {
        return Err(CliError::Usage("--resume and --stop-after-epoch only apply to `train`".into()));
    }
    let plan = verbs::plan(cli, &cfg)?;
    let run_dir = match plan.reuse_dir {
        Some(dir) => dir,
        None => create_run_dir(&cfg, cli.verb)?,
    };
    tracing::info!(verb = cli.verb.name(), run_dir = %run_dir.display(), "starting");
    let summary = verbs::execute(cli, &cfg, &run_dir)?;
    Ok(Outcome {
        verb: cli.verb,
        run_dir,
        summary,
    })
}
