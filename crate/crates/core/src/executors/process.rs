//! Runs jobs as local child processes.
//!
//! Each child gets its own process group so that faults reach every
//! process a shell wrapper spawns. A watcher thread per child reads metric
//! lines from stdout, waits for the exit status and posts the terminal
//! event on a channel drained by [`Executor::wait`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::{ExecError, ExecEvent, Executor, FaultSpec, JobSpec, MetricsTransport};
use crate::lifecycle::{FailureMode, FaultKind};
use crate::telemetry::{MetricPoint, MetricsStore};
use crate::time::Timestamp;

#[derive(Default)]
struct JobFlags {
    /// Stopped by the engine; the exit is not reported.
    stopped: AtomicBool,
    /// Killed by a fault; the exit is reported as a kill.
    killed: AtomicBool,
    exited: AtomicBool,
}

struct ProcJob {
    pgid: i32,
    flags: Arc<JobFlags>,
    watcher: Option<JoinHandle<()>>,
}

pub struct ProcessExecutor {
    started: Instant,
    /// Wall-clock milliseconds at `started`, for converting metric lines.
    epoch_ms: u64,
    store: Arc<MetricsStore>,
    jobs: BTreeMap<String, ProcJob>,
    faults: BTreeMap<String, FaultSpec>,
    tx: Sender<ExecEvent>,
    rx: Receiver<ExecEvent>,
    ready: Vec<ExecEvent>,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| u64::try_from(d.as_millis()).unwrap_or(u64::MAX))
}

fn signal_group(pgid: i32, sig: libc::c_int) -> bool {
    // SAFETY: kill(2) with a negative pid signals a process group; it has
    // no memory-safety preconditions.
    unsafe { libc::kill(-pgid, sig) == 0 }
}

/// Parses `metric <name> <value> <unix-ms>`; anything else is ignored.
fn parse_metric_line(line: &str, epoch_ms: u64) -> Option<MetricPoint> {
    let mut parts = line.split_whitespace();
    if parts.next()? != "metric" {
        return None;
    }
    let name = parts.next()?;
    let value: f64 = parts.next()?.parse().ok()?;
    let at: u64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some(MetricPoint::new(name, value, Timestamp(at.saturating_sub(epoch_ms))))
}

impl ProcessExecutor {
    pub fn new(store: Arc<MetricsStore>) -> Self {
        let (tx, rx) = mpsc::channel();
        ProcessExecutor {
            started: Instant::now(),
            epoch_ms: unix_ms(),
            store,
            jobs: BTreeMap::new(),
            faults: BTreeMap::new(),
            tx,
            rx,
            ready: Vec::new(),
        }
    }

    fn running(&self, job: &str) -> bool {
        self.jobs
            .get(job)
            .is_some_and(|j| !j.flags.exited.load(Ordering::SeqCst) && !j.flags.stopped.load(Ordering::SeqCst))
    }
}

impl Executor for ProcessExecutor {
    fn name(&self) -> &'static str {
        "process"
    }

    fn now(&self) -> Timestamp {
        Timestamp(u64::try_from(self.started.elapsed().as_millis()).unwrap_or(u64::MAX))
    }

    fn start_job(&mut self, spec: &JobSpec) -> Result<(), ExecError> {
        if self.jobs.contains_key(&spec.name) {
            return Err(ExecError::DuplicateJob(spec.name.clone()));
        }
        let spawn_err = |message: String| ExecError::Spawn {
            job: spec.name.clone(),
            message,
        };
        let cmd = spec
            .process
            .as_ref()
            .ok_or_else(|| spawn_err("no process command".to_string()))?;
        let (program, args) = cmd
            .command
            .split_first()
            .ok_or_else(|| spawn_err("empty command".to_string()))?;
        let mut child = Command::new(program)
            .args(args)
            .envs(&cmd.env)
            .env("WHATIF_JOB", &spec.name)
            .env("WHATIF_HOST", &spec.host)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .process_group(0)
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let pgid = child.id() as i32;
        let flags = Arc::new(JobFlags::default());
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, store, epoch_ms, started) = (self.tx.clone(), self.store.clone(), self.epoch_ms, self.started);
        let (name, watch_flags, transport) = (spec.name.clone(), flags.clone(), cmd.metrics);
        let watcher = thread::Builder::new()
            .name(format!("watch-{name}"))
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if transport == MetricsTransport::StdoutLines {
                        if let Some(p) = parse_metric_line(&line, epoch_ms) {
                            store.ingest(p);
                        }
                    }
                }
                let status = child.wait();
                watch_flags.exited.store(true, Ordering::SeqCst);
                if watch_flags.stopped.load(Ordering::SeqCst) {
                    return;
                }
                let at = Timestamp(u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX));
                let event = match status {
                    _ if watch_flags.killed.load(Ordering::SeqCst) => {
                        ExecEvent::failed(&name, at, FailureMode::Kill, "killed by fault")
                    }
                    Ok(s) if s.success() => ExecEvent::success(&name, at),
                    Ok(s) => match (s.code(), s.signal()) {
                        (Some(code), _) => ExecEvent::failed(&name, at, FailureMode::Crash, format!("exit={code}")),
                        (None, Some(sig)) => ExecEvent::failed(&name, at, FailureMode::Crash, format!("signal={sig}")),
                        _ => ExecEvent::failed(&name, at, FailureMode::Crash, "abnormal exit"),
                    },
                    Err(e) => ExecEvent::failed(&name, at, FailureMode::Crash, e.to_string()),
                };
                let _ = tx.send(event);
            })
            .map_err(|e| spawn_err(e.to_string()))?;
        self.ready.push(ExecEvent::running(&spec.name, self.now()));
        self.jobs.insert(
            spec.name.clone(),
            ProcJob {
                pgid,
                flags,
                watcher: Some(watcher),
            },
        );
        tracing::debug!(job = %spec.name, pgid, "spawned");
        Ok(())
    }

    fn stop_job(&mut self, job: &str) -> Result<(), ExecError> {
        let j = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| ExecError::UnknownJob(job.to_string()))?;
        j.flags.stopped.store(true, Ordering::SeqCst);
        if !j.flags.exited.load(Ordering::SeqCst) {
            signal_group(j.pgid, libc::SIGCONT);
            signal_group(j.pgid, libc::SIGKILL);
        }
        if let Some(w) = j.watcher.take() {
            let _ = w.join();
        }
        Ok(())
    }

    fn inject_fault(&mut self, fault: &FaultSpec) -> Result<(), ExecError> {
        if fault.kind == FaultKind::Partition {
            return Err(ExecError::UnsupportedFault(fault.kind));
        }
        fault.check()?;
        if self.faults.contains_key(&fault.id) {
            return Err(ExecError::InvalidFault(format!("{}: handle already active", fault.id)));
        }
        if let Some(t) = fault.targets.iter().find(|t| !self.running(t)) {
            return Err(ExecError::TargetNotRunning(t.clone()));
        }
        for t in &fault.targets {
            let j = &self.jobs[t];
            match fault.kind {
                FaultKind::Kill => {
                    j.flags.killed.store(true, Ordering::SeqCst);
                    signal_group(j.pgid, libc::SIGKILL);
                }
                FaultKind::Suspend => {
                    signal_group(j.pgid, libc::SIGSTOP);
                }
                FaultKind::Partition => unreachable!(),
            }
        }
        self.faults.insert(fault.id.clone(), fault.clone());
        Ok(())
    }

    fn revoke_fault(&mut self, id: &str) -> Result<(), ExecError> {
        let fault = self
            .faults
            .remove(id)
            .ok_or_else(|| ExecError::UnknownHandle(id.to_string()))?;
        if fault.kind == FaultKind::Suspend {
            for t in &fault.targets {
                if let Some(j) = self.jobs.get(t) {
                    if !j.flags.exited.load(Ordering::SeqCst) {
                        signal_group(j.pgid, libc::SIGCONT);
                    }
                }
            }
        }
        Ok(())
    }

    fn wait(&mut self, deadline: Timestamp) -> Vec<ExecEvent> {
        let mut out = std::mem::take(&mut self.ready);
        if out.is_empty() {
            let now = self.now();
            if deadline > now {
                let budget = Duration::from_millis(deadline.0 - now.0);
                match self.rx.recv_timeout(budget) {
                    Ok(e) => out.push(e),
                    Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {}
                }
            }
        }
        out.extend(self.rx.try_iter());
        out
    }
}

impl Drop for ProcessExecutor {
    fn drop(&mut self) {
        let names: Vec<String> = self.jobs.keys().cloned().collect();
        for name in names {
            let _ = self.stop_job(&name);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executors::JobKind;
    use crate::lifecycle::Phase;

    fn sh(name: &str, script: &str) -> JobSpec {
        JobSpec {
            name: name.into(),
            kind: JobKind::Service,
            host: name.into(),
            sim: None,
            process: Some(crate::executors::ProcessCommand {
                command: vec!["sh".into(), "-c".into(), script.into()],
                ..Default::default()
            }),
        }
    }

    fn drain_until_terminal(exec: &mut ProcessExecutor, job: &str) -> Vec<ExecEvent> {
        let mut events = Vec::new();
        let limit = Instant::now() + Duration::from_secs(10);
        while Instant::now() < limit {
            let deadline = Timestamp(exec.now().0 + 200);
            events.extend(exec.wait(deadline));
            if events.iter().any(|e| e.job == job && e.phase.is_terminal()) {
                break;
            }
        }
        events
    }

    #[test]
    fn parses_metric_lines() {
        let p = parse_metric_line("metric goroutines 1200 5000", 1000).unwrap();
        assert_eq!(
            (p.name.as_str(), p.value, p.at),
            ("goroutines", 1200.0, Timestamp(4000))
        );
        assert!(parse_metric_line("hello world", 0).is_none());
        assert!(parse_metric_line("metric x notanumber 1", 0).is_none());
        assert!(parse_metric_line("metric x 1 2 3", 0).is_none());
    }

    #[test]
    fn exit_codes_map_to_phases() {
        let mut exec = ProcessExecutor::new(Arc::new(MetricsStore::new()));
        exec.start_job(&sh("ok", "exit 0")).unwrap();
        exec.start_job(&sh("bad", "exit 1")).unwrap();
        let mut events = drain_until_terminal(&mut exec, "ok");
        events.extend(drain_until_terminal(&mut exec, "bad"));
        let ok = events.iter().find(|e| e.job == "ok" && e.phase.is_terminal()).unwrap();
        assert_eq!(ok.phase, Phase::Success);
        let bad = events.iter().find(|e| e.job == "bad" && e.phase.is_terminal()).unwrap();
        assert_eq!((bad.phase, bad.reason.as_deref()), (Phase::Failed, Some("exit=1")));
    }

    #[test]
    fn missing_binary_is_spawn_error() {
        let mut exec = ProcessExecutor::new(Arc::new(MetricsStore::new()));
        let mut spec = sh("x", "");
        spec.process.as_mut().unwrap().command = vec!["/nonexistent/binary".into()];
        assert!(matches!(exec.start_job(&spec), Err(ExecError::Spawn { .. })));
    }

    #[test]
    fn stdout_metrics_are_ingested() {
        let store = Arc::new(MetricsStore::new());
        let mut exec = ProcessExecutor::new(store.clone());
        let epoch = exec.epoch_ms;
        let script = format!(
            "echo 'metric goroutines 1200 {}'; echo 'metric goroutines 1300 {}'",
            epoch + 10,
            epoch + 20
        );
        exec.start_job(&sh("emit", &script)).unwrap();
        drain_until_terminal(&mut exec, "emit");
        let values: Vec<f64> = store
            .query("goroutines", Timestamp::ZERO, Timestamp::MAX)
            .unwrap()
            .iter()
            .map(|p| p.value)
            .collect();
        assert_eq!(values, [1200.0, 1300.0]);
    }

    #[test]
    fn kill_and_partition() {
        let mut exec = ProcessExecutor::new(Arc::new(MetricsStore::new()));
        exec.start_job(&sh("sleeper", "sleep 30")).unwrap();
        let partition = FaultSpec {
            id: "p".into(),
            kind: FaultKind::Partition,
            targets: vec!["sleeper".into()],
            dst: vec!["x".into()],
            direction: None,
            duration: Some(Duration::from_secs(1)),
        };
        assert!(matches!(
            exec.inject_fault(&partition),
            Err(ExecError::UnsupportedFault(FaultKind::Partition))
        ));
        let kill = FaultSpec {
            id: "k".into(),
            kind: FaultKind::Kill,
            targets: vec!["sleeper".into()],
            dst: vec![],
            direction: None,
            duration: None,
        };
        exec.inject_fault(&kill).unwrap();
        let events = drain_until_terminal(&mut exec, "sleeper");
        let last = events.last().unwrap();
        assert_eq!((last.phase, last.mode), (Phase::Failed, Some(FailureMode::Kill)));
    }
}
