//! `mamcl` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamcl_core::Error;

#[derive(Parser)]
#[command(
    name = "mamcl",
    version,
    about = "Modality-aware contrastive learning at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config file (or a manifest written by an earlier run).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "mamcl-out")]
    pub out: PathBuf,
    /// Seed override applied to every seed field of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key.path=value` override, repeatable. Values are JSON or bare strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and evaluation sets.
    GenData(Common),
    /// Train the encoder.
    Train(Common),
    /// Evaluate trained parameters (or an external embedding bundle).
    Eval(Common),
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck(Common),
    /// Training-data composition sweep.
    Sweep(Common),
    /// Masking or hard-negative ablation.
    Ablate(Common),
    /// Print the one-word summary prompt.
    Prompt {
        #[arg(long)]
        image: bool,
        #[arg(long)]
        video: bool,
        /// Text content; without a value the `<text>` placeholder is used.
        #[arg(long, num_args = 0..=1, default_missing_value = mamcl_core::io_store::TEXT_PLACEHOLDER)]
        text: Option<String>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        CliError::Config(m.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::VersionMismatch(_)
            | Error::UnsupportedDtype(_)
            | Error::TruncatedPayload { .. }
            | Error::TrailingBytes(_)
            | Error::SidecarRowOutOfRange { .. }
            | Error::Sidecar { .. } => CliError::Io(m),
            Error::ZeroVector { .. } | Error::NonFinite { .. } => CliError::Numeric(m),
            _ => CliError::Config(m),
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MAMCL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::config(format!(
            "MAMCL_THREADS={raw:?} is not a non-negative integer"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Gradcheck(c) => commands::gradcheck(&c),
        Command::Sweep(c) => commands::sweep(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Prompt { image, video, text } => {
            let p = mamcl_core::io_store::build_eol_prompt(image, video, text.as_deref())?;
            // Exactly the template, no trailing newline.
            print!("{p}");
            std::io::Write::flush(&mut std::io::stdout()).map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mamcl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
