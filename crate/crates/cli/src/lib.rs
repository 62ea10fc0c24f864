//! `ifclust` command-line driver.
//!
//! Every command reads JSONL inputs, writes its outputs into `--out`, and
//! leaves a `manifest-<command>.json` beside them. Failures print a single
//! JSON line on stderr and exit with 1 (usage), 2 (data) or 3 (endpoint).

use std::ffi::OsString;
use std::fmt;
use std::path::Path;

use clap::{Parser, Subcommand};
use ifclust_llm::synth::SynthError;
use ifclust_llm::LlmError;
use serde_json::json;

mod args;
mod commands;
pub mod manifest;

pub use args::*;

#[derive(Debug, Parser)]
#[command(name = "ifclust", version, about = "Instruction-following text clustering toolkit")]
pub struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build TRAIN/C0/C1/C2 example files from task JSONL.
    Split(SplitArgs),
    /// Synthesize tasks from raw corpora with generator, refiner and labeler agents.
    Synth(SynthArgs),
    /// Generate and review reasoning traces for examples.
    Traces(TracesArgs),
    /// Query a chat endpoint for every example and cache the raw responses.
    Infer(InferArgs),
    /// Score cached responses and write a report.
    Score(ScoreArgs),
    /// Cluster embeddings with K-means or GMM using the gold cluster count.
    Baseline(BaselineArgs),
    /// Per-group rewards and group-relative advantages for sampled responses.
    Reward(RewardArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Split(_) => "split",
            Command::Synth(_) => "synth",
            Command::Traces(_) => "traces",
            Command::Infer(_) => "infer",
            Command::Score(_) => "score",
            Command::Baseline(_) => "baseline",
            Command::Reward(_) => "reward",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Endpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Endpoint(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Endpoint(_) => "endpoint",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Endpoint(m) => m,
        }
    }

    /// Single-line JSON form written to stderr.
    pub fn to_json_line(&self, command: Option<&str>) -> String {
        json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "command": command,
            "message": self.message(),
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<ifclust_core::Error> for CliError {
    fn from(e: ifclust_core::Error) -> Self {
        match e {
            ifclust_core::Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(m) => CliError::Usage(m),
            LlmError::Core(c) => c.into(),
            other => CliError::Endpoint(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Agent(a) => a.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub(crate) fn io_context(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn init_logging(verbose: bool) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| EnvFilter::new(if verbose { "info" } else { "warn" }));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

/// Parses `argv` and runs the command. Returns the process exit code; all
/// output (including errors) has been written when this returns.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", CliError::Usage(first).to_json_line(None));
            return 1;
        }
    };
    init_logging(cli.verbose);
    let name = cli.command.name();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line(Some(name)));
            e.exit_code()
        }
    }
}
