//! `etongue` command line: runs scenarios, drives the edge agent, serves the
//! cloud side, and trains, evaluates and queries models.
//!
//! Exit codes: 0 ok, 2 validation, 3 transport, 4 internal.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use commands::run;

#[derive(Debug, Parser)]
#[command(
    name = "etongue",
    version,
    about = "Electronic tongue: simulator, edge agent, service and classifier"
)]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate measurements and write them as record JSON files.
    Simulate(SimulateArgs),
    /// Run the edge agent against the simulator and upload the record.
    Acquire(AcquireArgs),
    /// Run the cloud service.
    Serve(ServeArgs),
    /// Train a model on the service's labeled records.
    Train(TrainArgs),
    /// Classify a record with a deployed model.
    Infer(InferArgs),
    /// Offline pipeline on a scenario pack: LOOCV accuracy, confusion matrix, importances.
    Evaluate(EvaluateArgs),
    /// List built-in scenario packs or export one as a directory.
    Scenarios(ScenariosArgs),
}

/// Which scenarios a command runs.
#[derive(Debug, Clone, Args)]
pub struct ScenarioSelect {
    /// Scenario TOML file, or a scenario name inside `--pack`.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Built-in pack name or pack directory.
    #[arg(long)]
    pub pack: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub select: ScenarioSelect,
    /// Output directory; one `{record_id}.json` per measurement.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AcquireArgs {
    #[command(flatten)]
    pub select: ScenarioSelect,
    /// Service base URL.
    #[arg(long)]
    pub endpoint: String,
    /// Pacing: 1.0 is real time; 0 runs instantly with a virtual clock.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    /// Class label to attach (training data).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value = "edge-sim")]
    pub device_id: String,
    /// Also write the record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Upload attempts before giving up.
    #[arg(long, default_value_t = 5)]
    pub attempts: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Data directory for the record log and models; in memory when absent.
    #[arg(long, env = etongue_service::DATA_DIR_ENV)]
    pub data: Option<PathBuf>,
    /// Extra pack directories offered to relayed acquisitions.
    #[arg(long = "pack")]
    pub packs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub endpoint: String,
    /// Restrict training to these labels (repeatable).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    /// Return as soon as the job is accepted instead of waiting for it.
    #[arg(long)]
    pub no_wait: bool,
    /// Seconds to wait for training to finish.
    #[arg(long, default_value_t = 600)]
    pub timeout: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub model: String,
    /// Stored record id, or a record JSON file sent inline.
    #[arg(long)]
    pub record: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Built-in pack name or pack directory.
    #[arg(long)]
    pub scenario_pack: String,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
}

#[derive(Debug, Args)]
pub struct ScenariosArgs {
    /// Pack to show or export.
    #[arg(long)]
    pub pack: Option<String>,
    /// Write the pack as a directory here.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Validation,
    Transport,
    Internal,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Transport,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Transport => 3,
            ErrorKind::Internal => 4,
        }
    }
}

/// What a command produced: text for people, a JSON document for `--json`.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
}

impl Output {
    pub fn new(text: impl Into<String>, json: impl Serialize) -> Self {
        Self {
            text: text.into(),
            json: serde_json::to_value(json).expect("output serializes"),
        }
    }
}
