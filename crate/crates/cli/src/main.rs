//! `amdtest`: relative-similarity testing from the command line.
//!
//! ```text
//! amdtest test  --anchor z.csv --p x.csv --q y.csv [--mode amd] [--kernel gaussian] [--out result.json]
//! amdtest bench power|type1|beta|lambda [--reps 300] [--m 100] [--nu 0,0.1,...] [--out table.csv]
//! ```
//!
//! Exit codes: 0 success (whatever the test decides), 1 usage error,
//! 2 data error, 3 numeric failure.

mod bench;
mod input;
mod test_cmd;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use amd_core::table::write_atomic;
use amd_core::AmdError;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "amdtest", version, about = "Anchor-based relative-similarity test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test which of P and Q is closer to the anchor sample.
    Test(test_cmd::TestArgs),
    /// Run a Monte Carlo benchmark on synthetic mixtures.
    Bench(bench::BenchArgs),
}

/// An operational failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<AmdError> for Failure {
    fn from(e: AmdError) -> Self {
        let code = match e {
            AmdError::Degenerate(_) | AmdError::Numeric(_) => 3,
            AmdError::Dimension(_) | AmdError::Input(_) | AmdError::Io(_) | AmdError::Unsupported(_) => 2,
        };
        Self { code, message: e.to_string() }
    }
}

/// Configuration errors are the caller's fault, not the data's.
pub fn config_error(e: AmdError) -> Failure {
    Failure::usage(e.to_string())
}

/// Write to `out` atomically, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomic(path, contents.as_bytes()).map_err(Failure::from),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, Failure> {
    if workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure { code: 3, message: format!("cannot start worker pool: {e}") })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Test(args) => test_cmd::run(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("amdtest: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
