use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use whatif_cli::{cmd_report, cmd_run, cmd_validate, ExecutorKind, ReportFormat, RunConfig};

#[derive(Parser)]
#[command(name = "whatif", version, about = "Validate, run and report what-if test scenarios")]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario without running it.
    Validate {
        scenario: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Run a scenario and store its trace, metrics and report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sim")]
        executor: ExecutorKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "whatif-run")]
        out: PathBuf,
        /// Timeout for actions when the scenario sets none [engine default: 1h].
        #[arg(long, value_parser = humantime_duration)]
        timeout_default: Option<Duration>,
    },
    /// Render a completed run.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
}

fn humantime_duration(s: &str) -> Result<Duration, String> {
    whatif::time::parse_duration(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .init();

    let mut stdout = io::stdout().lock();
    let code = match cli.command {
        Command::Validate { scenario, templates } => cmd_validate(&scenario, templates.as_deref(), &mut stdout),
        Command::Run {
            scenario,
            templates,
            executor,
            seed,
            out,
            timeout_default,
        } => cmd_run(&RunConfig {
            scenario,
            templates,
            executor,
            seed,
            out,
            timeout_default,
        }),
        Command::Report { dir, format } => cmd_report(&dir, format, &mut stdout),
    };
    ExitCode::from(code as u8)
}
