//! `dualformer` command-line front end.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage or configuration error,
//! 3 numeric abort. `DF_THREADS` caps the worker pool.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Command failure, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<dualformer::Error> for Failure {
    fn from(e: dualformer::Error) -> Self {
        match e {
            dualformer::Error::Diverged { .. } | dualformer::Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

fn init_threads() -> Result<usize, Failure> {
    if let Ok(v) = std::env::var("DF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("DF_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|threads| match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Forward(a) => commands::forward(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Erf(a) => commands::erf(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Train(a) => commands::train(a, threads),
        Command::Eval(a) => commands::eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
