//! `gle` — garment landmark detection pipeline: synthetic data generation,
//! training, evaluation, prediction overlays, and gradient checking.
//!
//! Every subcommand is deterministic given its flags and inputs; rerunning
//! a command overwrites its outputs with byte-identical artifacts. All
//! errors print a single machine-parseable line: `error[<kind>]: <message>`.

mod config;
mod eval_cmd;
mod gen_data;
mod gradcheck_cmd;
mod predict_cmd;
mod train_cmd;

use clap::{Parser, Subcommand};
use gle_core::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gle",
    version,
    about = "Garment landmark detection: synthetic data, training, evaluation, prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic garment dataset
    GenData(gen_data::GenDataArgs),
    /// Train a landmark network, writing checkpoints and a loss log
    Train(train_cmd::TrainArgs),
    /// Score a checkpoint on a dataset and print the per-landmark table
    Eval(eval_cmd::EvalArgs),
    /// Run a checkpoint over images, writing coordinates and overlays
    Predict(predict_cmd::PredictArgs),
    /// Finite-difference check of every op and the composed network
    Gradcheck(gradcheck_cmd::GradcheckArgs),
}

/// CLI-level error: either a core error or a command-specific failure with
/// its own kind token.
pub enum CliError {
    Core(Error),
    Msg { kind: &'static str, msg: String },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn msg(kind: &'static str, msg: impl Into<String>) -> Self {
        CliError::Msg {
            kind,
            msg: msg.into(),
        }
    }

    /// The stable single-line form: `error[<kind>]: <message>`.
    fn to_line(&self) -> String {
        let (kind, text) = match self {
            CliError::Core(e) => (core_error_kind(e), e.to_string()),
            CliError::Msg { kind, msg } => (*kind, msg.clone()),
        };
        let one_line = text.replace('\n', "; ");
        format!("error[{kind}]: {one_line}")
    }
}

fn core_error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } | Error::NonScalarBackward(_) => "shape",
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonDeterministic => {
            "numeric"
        }
        Error::InvalidConfig(_) | Error::MemoryGuard { .. } => "config",
        Error::DegenerateBatch | Error::Annotation { .. } => "data",
        Error::Format { .. } => "format",
        Error::Checksum => "checksum",
        Error::VersionMismatch { .. } => "version",
        Error::UnknownParameter(_) => "checkpoint",
        Error::Io { .. } => "io",
    }
}

pub type CliResult = Result<(), CliError>;

/// Internal parallelism cap. The numeric pipeline is sequential and
/// bit-stable for any cap, so the value only needs validating.
fn read_thread_cap() -> Result<usize, CliError> {
    match std::env::var("GLE_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(std::env::VarError::NotUnicode(_)) => Err(CliError::msg(
            "config",
            "GLE_THREADS must be a positive integer",
        )),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::msg(
                "config",
                format!("GLE_THREADS must be a positive integer, got {v:?}"),
            )),
        },
    }
}

/// Print a line to stdout, tolerating a closed pipe (e.g. `gle ... | head`).
pub fn say(msg: std::fmt::Arguments) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{msg}");
}

#[macro_export]
macro_rules! sayln {
    ($($arg:tt)*) => { $crate::say(format_args!($($arg)*)) };
}

pub fn create_dir(path: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Core(Error::io(path.display().to_string(), e)))
}

pub fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Core(Error::io(path.display().to_string(), e)))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                // Not errors: print and exit 0.
                print!("{e}");
                std::process::exit(0);
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error[usage]: {first}");
            std::process::exit(2);
        }
    };

    let result = read_thread_cap().and_then(|_threads| match cli.command {
        Command::GenData(args) => gen_data::run(&args),
        Command::Train(args) => train_cmd::run(&args),
        Command::Eval(args) => eval_cmd::run(&args),
        Command::Predict(args) => predict_cmd::run(&args),
        Command::Gradcheck(args) => gradcheck_cmd::run(&args),
    });

    if let Err(e) = result {
        eprintln!("{}", e.to_line());
        std::process::exit(1);
    }
}
