mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use confide::format::to_json_string;
use confide::{Error, Result};
use serde_json::json;

use args::{merge, Cli, Command};

const THREADS_VAR: &str = "CONFIDE_THREADS";

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Error::ConfigInvalid(format!(
            "{THREADS_VAR} must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))
}

macro_rules! resolve {
    ($args:expr, $seed:expr) => {{
        let mut flags = $args;
        flags.seed = $seed;
        let path = flags.config.take();
        merge(flags, path.as_deref())?
    }};
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let verbose = cli.verbose;
    let log = move |msg: &str| {
        if verbose {
            eprintln!("confide: {msg}");
        }
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&resolve!(a, cli.seed), &log),
        Command::Fit(a) => commands::fit_cmd(&resolve!(a, cli.seed), &log),
        Command::Combine(a) => commands::combine(&resolve!(a, cli.seed)),
        Command::Evaluate(a) => commands::evaluate_cmd(&resolve!(a, cli.seed)),
        Command::LearningCurve(a) => commands::learning_curve_cmd(&resolve!(a, cli.seed), &log),
        Command::Diagnose(a) => commands::diagnose(&resolve!(a, cli.seed)),
        Command::Theory(a) => commands::theory(&resolve!(a, cli.seed)),
    }
}

fn report_error(kind: &str, message: &str) {
    let body = json!({ "error": kind, "message": message });
    eprint!(
        "{}",
        to_json_string(&body).unwrap_or_else(|_| format!("{body}\n"))
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("UsageError", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
