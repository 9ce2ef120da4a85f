//! Backends that realise jobs and faults.
//!
//! The engine talks to an [`Executor`] only through commands (start, stop,
//! inject, revoke) and collects [`ExecEvent`]s by waiting on it. Metric
//! points bypass the engine and go straight into the shared store.

pub mod process;
pub mod sim;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::Direction;
use crate::lifecycle::{FailureMode, FaultKind, Phase};
use crate::time::Timestamp;

pub use process::ProcessExecutor;
pub use sim::{SimBehavior, SimExecutor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobKind {
    /// Long-running service instance, stopped at teardown.
    Service,
    /// One callable invocation on a service; finishes on its own.
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsTransport {
    #[default]
    StdoutLines,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessCommand {
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub metrics: MetricsTransport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub name: String,
    pub kind: JobKind,
    /// Service the job runs on; equal to `name` for service jobs.
    pub host: String,
    pub sim: Option<SimBehavior>,
    pub process: Option<ProcessCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Handle used to revoke the fault.
    pub id: String,
    pub kind: FaultKind,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dst: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(
        default,
        with = "crate::time::serde_opt_duration",
        skip_serializing_if = "Option::is_none"
    )]
    pub duration: Option<Duration>,
}

impl FaultSpec {
    pub fn check(&self) -> Result<(), ExecError> {
        let invalid = |m: &str| Err(ExecError::InvalidFault(format!("{}: {m}", self.id)));
        if self.targets.is_empty() {
            return invalid("no targets");
        }
        match self.kind {
            FaultKind::Kill => {}
            FaultKind::Suspend | FaultKind::Partition => {
                if self.duration.is_none_or(|d| d.is_zero()) {
                    return invalid("duration must be positive");
                }
            }
        }
        if self.kind == FaultKind::Partition && self.dst.is_empty() {
            return invalid("partition needs at least one destination");
        }
        Ok(())
    }

    /// Whether a message from `src` to `dst` is dropped by this partition.
    pub fn drops(&self, src: &str, dst: &str) -> bool {
        if self.kind != FaultKind::Partition {
            return false;
        }
        let is_source = |n: &str| self.targets.iter().any(|t| t == n);
        let is_dst = |n: &str| self.dst.iter().any(|t| t == n);
        let inbound = is_dst(src) && is_source(dst);
        let outbound = is_source(src) && is_dst(dst);
        match self.direction.unwrap_or(Direction::Both) {
            Direction::To => inbound,
            Direction::From => outbound,
            Direction::Both => inbound || outbound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecEvent {
    pub job: String,
    pub at: Timestamp,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<FailureMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ExecEvent {
    pub fn running(job: &str, at: Timestamp) -> Self {
        ExecEvent {
            job: job.to_string(),
            at,
            phase: Phase::Running,
            mode: None,
            reason: None,
        }
    }

    pub fn success(job: &str, at: Timestamp) -> Self {
        ExecEvent {
            phase: Phase::Success,
            ..ExecEvent::running(job, at)
        }
    }

    pub fn failed(job: &str, at: Timestamp, mode: FailureMode, reason: impl Into<String>) -> Self {
        ExecEvent {
            job: job.to_string(),
            at,
            phase: Phase::Failed,
            mode: Some(mode),
            reason: Some(reason.into()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to start {job}: {message}")]
    Spawn { job: String, message: String },
    #[error("job name already in use: {0}")]
    DuplicateJob(String),
    #[error("unknown job: {0}")]
    UnknownJob(String),
    #[error("{0} faults are not supported by this executor")]
    UnsupportedFault(FaultKind),
    #[error("fault target is not running: {0}")]
    TargetNotRunning(String),
    #[error("unknown fault handle: {0}")]
    UnknownHandle(String),
    #[error("invalid fault {0}")]
    InvalidFault(String),
}

pub trait Executor {
    fn name(&self) -> &'static str;

    /// Current time on the run clock.
    fn now(&self) -> Timestamp;

    fn start_job(&mut self, spec: &JobSpec) -> Result<(), ExecError>;

    /// Stops a job at teardown or abort. No terminal event is reported for it.
    fn stop_job(&mut self, job: &str) -> Result<(), ExecError>;

    fn inject_fault(&mut self, fault: &FaultSpec) -> Result<(), ExecError>;

    fn revoke_fault(&mut self, id: &str) -> Result<(), ExecError>;

    /// Blocks until at least one event is available or the clock reaches
    /// `deadline`. Every returned event happened before `deadline`.
    fn wait(&mut self, deadline: Timestamp) -> Vec<ExecEvent>;
}
