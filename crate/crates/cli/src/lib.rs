//! Commands behind the `whatif` binary.
//!
//! Every command returns its process exit code: 0 success, 1 the scenario
//! ran and failed, 2 invalid input, 3 aborted run.

pub mod report;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::ValueEnum;

use whatif::dsl::{parse_scenario_with_warnings, validate, Finding, ScenarioDoc, TemplateLibrary};
use whatif::engine::{run_scenario, RunError, RunOptions, RunTrace};
use whatif::executors::process::ProcessExecutor;
use whatif::executors::sim::SimExecutor;
use whatif::executors::Executor;
use whatif::telemetry::MetricsStore;

use report::{PlotData, RunReport};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.txt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecutorKind {
    Sim,
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
    Plotdata,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: PathBuf,
    /// Defaults to a `templates` directory next to the scenario, if any.
    pub templates: Option<PathBuf>,
    pub executor: ExecutorKind,
    pub seed: u64,
    pub out: PathBuf,
    /// Scenario-wide timeout for documents that do not set one.
    pub timeout_default: Option<Duration>,
}

struct Inputs {
    doc: ScenarioDoc,
    templates: TemplateLibrary,
    warnings: Vec<Finding>,
}

fn load_inputs(scenario: &Path, templates: Option<&Path>) -> Result<Inputs, String> {
    let text = fs::read_to_string(scenario).map_err(|e| format!("cannot read {}: {e}", scenario.display()))?;
    let (doc, warnings) = parse_scenario_with_warnings(&text).map_err(|e| format!("{}: {e}", scenario.display()))?;
    let dir = match templates {
        Some(dir) => Some(dir.to_path_buf()),
        None => scenario.parent().map(|p| p.join("templates")).filter(|p| p.is_dir()),
    };
    let templates = match dir {
        Some(dir) => TemplateLibrary::load_dir(&dir).map_err(|e| e.to_string())?,
        None => TemplateLibrary::new(),
    };
    Ok(Inputs {
        doc,
        templates,
        warnings,
    })
}

/// Checks a scenario and prints every finding to `out`.
pub fn cmd_validate(scenario: &Path, templates: Option<&Path>, out: &mut dyn Write) -> i32 {
    let inputs = match load_inputs(scenario, templates) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let mut report = validate(&inputs.doc, &inputs.templates);
    report.extend(inputs.warnings);
    for f in &report.findings {
        let _ = writeln!(out, "{f}");
    }
    let errors = report.errors().count();
    let _ = if report.ok {
        writeln!(out, "{}: ok ({} warning(s))", inputs.doc.name, report.findings.len())
    } else {
        writeln!(out, "{}: invalid ({errors} error(s))", inputs.doc.name)
    };
    if report.ok {
        EXIT_SUCCESS
    } else {
        EXIT_INVALID
    }
}

/// Runs a scenario and writes trace, metrics and report into `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> i32 {
    let Inputs { mut doc, templates, .. } = match load_inputs(&cfg.scenario, cfg.templates.as_deref()) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    if doc.defaults.timeout.is_none() {
        doc.defaults.timeout = cfg.timeout_default;
    }
    match execute(&doc, &templates, cfg) {
        Ok(code) => code,
        Err(RunFailure::Invalid(findings)) => {
            for f in findings {
                eprintln!("{f}");
            }
            EXIT_INVALID
        }
        Err(RunFailure::Io(e)) => {
            eprintln!("error: cannot write run output to {}: {e}", cfg.out.display());
            EXIT_ABORTED
        }
    }
}

enum RunFailure {
    Invalid(Vec<Finding>),
    Io(io::Error),
}

impl From<io::Error> for RunFailure {
    fn from(e: io::Error) -> Self {
        RunFailure::Io(e)
    }
}

fn execute(doc: &ScenarioDoc, templates: &TemplateLibrary, cfg: &RunConfig) -> Result<i32, RunFailure> {
    fs::create_dir_all(&cfg.out)?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let sink = BufWriter::new(File::create(&metrics_path)?);
    let store = Arc::new(MetricsStore::with_persistence(Box::new(sink)));
    let mut executor: Box<dyn Executor> = match cfg.executor {
        ExecutorKind::Sim => Box::new(SimExecutor::new(cfg.seed, store.clone())),
        ExecutorKind::Process => Box::new(ProcessExecutor::new(store.clone())),
    };
    let opts = RunOptions {
        seed: cfg.seed,
        ..RunOptions::default()
    };
    let result = match run_scenario(doc, templates, executor.as_mut(), store.clone(), &opts) {
        Ok(r) => r,
        Err(RunError::Invalid(report)) => return Err(RunFailure::Invalid(report.findings)),
    };
    // Stops whatever the process executor still has running.
    drop(executor);
    store.flush()?;
    tracing::info!(outcome = ?result.outcome, reason = %result.reason, "run complete");
    fs::write(cfg.out.join(TRACE_FILE), result.trace.to_ndjson())?;
    let report = load_report(&cfg.out).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    fs::write(cfg.out.join(REPORT_FILE), report.0.to_json())?;
    eprintln!("{}: {:?} ({})", doc.name, result.outcome, result.reason);
    Ok(result.outcome.exit_code())
}

fn load_report(dir: &Path) -> Result<(RunReport, MetricsStore), String> {
    let trace_path = dir.join(TRACE_FILE);
    let text = fs::read_to_string(&trace_path).map_err(|e| format!("cannot read {}: {e}", trace_path.display()))?;
    let trace = RunTrace::from_ndjson(&text).map_err(|e| format!("{} is corrupt: {e}", trace_path.display()))?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::open(&metrics_path).map_err(|e| format!("cannot read {}: {e}", metrics_path.display()))?;
    let store =
        MetricsStore::load(BufReader::new(file)).map_err(|e| format!("{} is corrupt: {e}", metrics_path.display()))?;
    let report = RunReport::build(&trace, &store).map_err(|e| format!("{}: {e}", trace_path.display()))?;
    Ok((report, store))
}

/// Renders the run stored in `dir` to `out`.
pub fn cmd_report(dir: &Path, format: ReportFormat, out: &mut dyn Write) -> i32 {
    let (report, store) = match load_report(dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let text = match format {
        ReportFormat::Text => report.render_text(),
        ReportFormat::Json => report.to_json() + "\n",
        ReportFormat::Plotdata => {
            serde_json::to_string_pretty(&PlotData::build(&report, &store)).expect("plot data serialises") + "\n"
        }
    };
    match out.write_all(text.as_bytes()) {
        Ok(()) => EXIT_SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}
