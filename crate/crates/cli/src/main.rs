mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_ct_core::Error as CoreError;
use sparse_ct_service::ServiceError;

use crate::config::{ConfigError, ENV_CONFIG};

/// Sparse-view CT simulation, artifact removal and reader-study pipeline.
#[derive(Debug, Parser)]
#[command(name = "sparse-ct-lab", version)]
struct Cli {
    /// TOML config file (default: $SPARSE_CT_LAB_CONFIG, else built-in defaults).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.max_epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the phantom cohort and its manifest.
    Phantom,
    /// Simulate full- and sparse-view reconstructions with residual labels.
    Simulate,
    /// Train one network per model level.
    Train,
    /// Post-process sparse images of the evaluated splits.
    Infer,
    /// MSE and SSIM against the full-view reference.
    Evaluate,
    /// Create the blinded study store and reader tokens.
    StudyInit,
    /// Serve the study to readers.
    StudyServe,
    /// Analyse collected annotations.
    StudyAnalyze,
    /// Write the image-quality and diagnostic tables.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn core_exit(e: &CoreError) -> u8 {
    match e {
        CoreError::Numeric(_) | CoreError::NonFinite(_) => EXIT_NUMERIC,
        CoreError::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_exit(e);
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::Config(_) => EXIT_USAGE,
                ServiceError::Core(c) => core_exit(c),
                ServiceError::Io { .. } => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// The error chain without causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli
        .config
        .or_else(|| std::env::var_os(ENV_CONFIG).map(PathBuf::from));
    let cfg = config::load(file.as_deref(), std::env::vars(), &cli.set)?;
    match cli.command {
        Command::Phantom => commands::phantom(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Train => commands::train_models(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::StudyInit => commands::study_init(&cfg),
        Command::StudyServe => commands::study_serve(&cfg),
        Command::StudyAnalyze => commands::study_analyze(&cfg),
        Command::Report => commands::report(&cfg),
        Command::ShowConfig => {
            print!("{}", toml::to_string(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
