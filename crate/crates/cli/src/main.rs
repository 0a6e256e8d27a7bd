//! `rotulus`: batch front-end for every pipeline stage.
//!
//! Exit codes: 0 success, 1 the operation failed, 2 bad usage.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure of a subcommand: bad flags or inputs (`Usage`) or a failed
/// operation (`Failed`).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn init_logging(verbose: u8, quiet: bool) {
    let default = match (quiet, verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("ROTULUS_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.global.verbose, cli.global.quiet);
    let g = &cli.global;
    let result = match &cli.command {
        Command::Segment(a) => commands::segment(g, a),
        Command::ExtractLines(a) => commands::extract_lines(g, a),
        Command::TrainLm(a) => commands::train_lm(g, a),
        Command::TrainHtr(a) => commands::train_htr(g, a),
        Command::Transcribe(a) => commands::transcribe(g, a),
        Command::DecodeLogits(a) => commands::decode_logits(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Correct(a) => commands::correct(g, a),
        Command::Translate(a) => commands::translate(g, a),
        Command::Stats(a) => commands::stats(g, a),
        Command::Serve(a) => commands::serve(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("rotulus: {}", m.replace('\n', " "));
            ExitCode::from(2)
        }
        Err(CliError::Failed(e)) => {
            eprintln!("rotulus: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
