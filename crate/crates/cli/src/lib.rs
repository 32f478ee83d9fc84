pub mod args;
pub mod commands;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

/// User errors name the offending flag and exit with 1; everything else exits with 2.
#[derive(Debug)]
pub enum Failure {
    User { flag: &'static str, message: String },
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Internal(e.into())
    }
}

pub fn user(flag: &'static str, message: impl std::fmt::Display) -> Failure {
    Failure::User {
        flag,
        message: message.to_string(),
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // Only fails when a host process already set up the global pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("--threads ignored: {e}");
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::User { flag, message }) => {
            eprintln!("error: {flag}: {message}");
            1
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            2
        }
    }
}
