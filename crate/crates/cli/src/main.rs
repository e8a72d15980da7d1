mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Flags;

#[derive(Parser)]
#[command(name = "statex", about = "Train, expand and evaluate recurrent language models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model, or continue from --in
    Train(Flags),
    /// Expand a checkpoint's recurrent state; without --in, print the
    /// accounting for a preset or configured shape
    Expand(Flags),
    /// Score a checkpoint on passkey or MQAR samples
    Eval(Flags),
    /// Compare two run directories as CSV
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List a checkpoint's config, metadata and tensors
    Inspect { path: PathBuf },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config; exit code 2.
    Config(String),
    /// Training or inference produced non-finite values; exit code 3.
    Numeric(String),
    Other(String),
}

impl From<statex::Error> for CliError {
    fn from(e: statex::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if matches!(e, statex::Error::InvalidArgument(_)) {
            CliError::Config(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STATEX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("STATEX_THREADS: `{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train(f) => commands::cmd_train(&f),
        Command::Expand(f) => commands::cmd_expand(&f),
        Command::Eval(f) => commands::cmd_eval(&f),
        Command::Compare { a, b, out } => commands::cmd_compare(&a, &b, out.as_deref()),
        Command::Inspect { path } => commands::cmd_inspect(&path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Config(m) => (2, m),
                CliError::Numeric(m) => (3, m),
                CliError::Other(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
