//! The `easydistill` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, Parser};

use crate::config::Severity;
use crate::error::Error;
use crate::pipeline::load_pipeline;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "easydistill", version, about = "Run a distillation job described by a JSON config")]
struct Args {
    /// Job configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Validate the config and print the stage plan without running it.
    #[arg(long)]
    dry_run: bool,
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    let root = match err {
        Error::Stage { source, .. } => source.as_ref(),
        e => e,
    };
    if root.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `argv` (program name first), run the job and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let Some(config) = args.config else {
        eprintln!("error: --config=<path> is required\n");
        eprintln!("{}", Args::command().render_usage());
        return EXIT_CONFIG;
    };
    let (pipeline, diagnostics) = match load_pipeline(&config) {
        Ok(p) => p,
        // an unreadable config file is a config error too
        Err(e @ Error::Io { .. }) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return exit_code(&e);
        }
    };
    for d in &diagnostics {
        let label = match d.severity {
            Severity::Notice => "notice",
            Severity::Warning => "warning",
        };
        eprintln!("{label}: {}", d.message);
    }
    if args.dry_run {
        print!("{}", pipeline.describe());
        return EXIT_OK;
    }
    match pipeline.run() {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
