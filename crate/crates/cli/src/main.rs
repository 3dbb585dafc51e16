mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit 1: bad input or configuration. Exit 2: the work itself failed.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "sign-curator",
    version,
    about = "Curate sign-language video/text pairs with vision-language models"
)]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Collect candidates from hashtag/user crawls and crawl manifests.
    Ingest(IngestArgs),
    /// Run the curation pipeline over a candidate file.
    Run(RunArgs),
    /// Continue an interrupted run from its checkpoint.
    Resume(RunArgs),
    /// Score pipeline decisions against gold labels.
    Eval(EvalArgs),
    /// Score extracted text against gold translations.
    Agreement(AgreementArgs),
    /// Per-language video counts and hours of a dataset manifest.
    Stats(StatsArgs),
    /// Write the release form of a manifest: video ids and text only.
    Export(ExportArgs),
    /// Print the effective configuration after flags and environment.
    Config(ConfigArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Pre-crawled manifest(s) with one JSON entry per line.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// Only these languages (ISO 639-3); repeatable.
    #[arg(long)]
    pub language: Vec<String>,
    /// Candidate file to write (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args)]
pub struct RunArgs {
    /// Candidate file written by `ingest`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub language: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Audit log of a finished run.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
    /// Count processing errors as rejections instead of leaving them out.
    #[arg(long)]
    pub include_processing_errors: bool,
    /// Count gold ids missing from the audit as rejections instead of failing.
    #[arg(long)]
    pub missing_as_rejected: bool,
}

#[derive(Args)]
pub struct AgreementArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON stats to write in addition to the printed table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Release file (JSON lines); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
}

#[derive(Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub workers: Option<usize>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SIGN_CURATOR_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
