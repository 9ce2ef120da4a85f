//! Deterministic discrete-event executor.
//!
//! Jobs follow scripts. One-shot steps run in order on a cursor; the gap
//! between consecutive offsets is preserved when a step is delayed by an
//! `await` or a suspension. Repeating steps (`every`) run independently in
//! the background. All randomness comes from one seeded generator, so the
//! same scripts, commands and seed always produce the same events.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExecError, ExecEvent, Executor, FaultSpec, JobKind, JobSpec};
use crate::lifecycle::{FailureMode, FaultKind, Phase};
use crate::telemetry::{MetricPoint, MetricsStore};
use crate::time::{duration_ms, serde_opt_duration, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitSpec {
    pub name: String,
    pub value: f64,
    /// Uniform noise in `[-jitter, jitter]` added to each point.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptPhase {
    Running,
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwaitSpec {
    pub from: String,
    #[serde(with = "crate::time::serde_duration")]
    pub timeout: Duration,
}

/// One line of a job script. Exactly one effect field must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// Offset from job start.
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub at: Option<Duration>,
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub every: Option<Duration>,
    /// Last offset at which a repeating entry may fire.
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub until: Option<Duration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<EmitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<ScriptPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub send: Option<String>,
    #[serde(default, rename = "await", skip_serializing_if = "Option::is_none")]
    pub wait_for: Option<AwaitSpec>,
}

/// Simulated behaviour of a service or callable.
///
/// `duration` (plus up to `jitter`, drawn from the run seed) is shorthand
/// for a final `phase: success` step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBehavior {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptEntry>,
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub duration: Option<Duration>,
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub jitter: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
enum Effect {
    Emit(EmitSpec),
    Phase(ScriptPhase),
    Crash(String),
    Send(String),
    Await(AwaitSpec),
}

#[derive(Debug, Clone, PartialEq)]
struct Repeat {
    start: Duration,
    every: Duration,
    until: Option<Duration>,
    effect: Effect,
}

impl ScriptEntry {
    fn effect(&self) -> Result<Effect, String> {
        let mut effects = Vec::new();
        if let Some(e) = &self.emit {
            effects.push(Effect::Emit(e.clone()));
        }
        if let Some(p) = self.phase {
            effects.push(Effect::Phase(p));
        }
        if let Some(c) = &self.crash {
            effects.push(Effect::Crash(c.clone()));
        }
        if let Some(s) = &self.send {
            effects.push(Effect::Send(s.clone()));
        }
        if let Some(a) = &self.wait_for {
            effects.push(Effect::Await(a.clone()));
        }
        match effects.len() {
            1 => Ok(effects.pop().unwrap()),
            0 => Err("script entry has no effect".to_string()),
            _ => Err("script entry has more than one effect".to_string()),
        }
    }
}

/// One-shot steps and repeating entries of a compiled script.
type Split = (Vec<(Duration, Effect)>, Vec<Repeat>);

impl SimBehavior {
    /// Static checks: one effect per entry, non-decreasing one-shot
    /// offsets, repeating entries limited to `emit` and `send`.
    pub fn check(&self) -> Result<(), String> {
        self.split().map(|_| ())
    }

    fn split(&self) -> Result<Split, String> {
        let mut steps = Vec::new();
        let mut repeats = Vec::new();
        let mut last = Duration::ZERO;
        for (i, entry) in self.script.iter().enumerate() {
            let effect = entry.effect().map_err(|e| format!("script[{i}]: {e}"))?;
            let at = entry.at.unwrap_or(last);
            if let Some(every) = entry.every {
                if every.is_zero() {
                    return Err(format!("script[{i}]: every must be positive"));
                }
                if !matches!(effect, Effect::Emit(_) | Effect::Send(_)) {
                    return Err(format!("script[{i}]: only emit and send may repeat"));
                }
                repeats.push(Repeat {
                    start: entry.at.unwrap_or(Duration::ZERO),
                    every,
                    until: entry.until,
                    effect,
                });
                continue;
            }
            if entry.until.is_some() {
                return Err(format!("script[{i}]: until requires every"));
            }
            if at < last {
                return Err(format!("script[{i}]: offsets must be non-decreasing"));
            }
            last = at;
            steps.push((at, effect));
        }
        if let Some(d) = self.duration {
            if d < last {
                return Err("duration is shorter than the last script offset".to_string());
            }
        }
        Ok((steps, repeats))
    }

    fn compile(&self, rng: &mut ChaCha8Rng) -> CompiledScript {
        let (mut steps, repeats) = self.split().expect("behaviour checked before start");
        if let Some(d) = self.duration {
            let jitter = self.jitter.map_or(0, duration_ms);
            let extra = if jitter > 0 { rng.gen_range(0..=jitter) } else { 0 };
            steps.push((d + Duration::from_millis(extra), Effect::Phase(ScriptPhase::Success)));
        }
        let explicit_running = steps
            .iter()
            .any(|(_, e)| matches!(e, Effect::Phase(ScriptPhase::Running)));
        CompiledScript {
            steps,
            repeats,
            explicit_running,
        }
    }
}

struct CompiledScript {
    steps: Vec<(Duration, Effect)>,
    repeats: Vec<Repeat>,
    explicit_running: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Step { job: String, epoch: u64 },
    Repeat { job: String, index: usize, epoch: u64 },
    AwaitTimeout { job: String, token: u64, epoch: u64 },
    Deliver { from: String, to: String },
}

struct SimJob {
    kind: JobKind,
    host: String,
    phase: Phase,
    steps: Vec<(Duration, Effect)>,
    repeats: Vec<Repeat>,
    start: Timestamp,
    cursor: usize,
    /// Completion time and offset of the last one-shot step.
    anchor: (Timestamp, Duration),
    waiting: Option<(String, u64)>,
    inbox: BTreeMap<String, usize>,
    deferred: Vec<Item>,
    epoch: u64,
}

impl SimJob {
    fn live(&self, epoch: u64) -> bool {
        self.epoch == epoch && !self.phase.is_terminal()
    }
}

pub struct SimExecutor {
    now: Timestamp,
    seq: u64,
    rng: ChaCha8Rng,
    store: Arc<MetricsStore>,
    queue: BTreeMap<(Timestamp, u64), Item>,
    jobs: BTreeMap<String, SimJob>,
    faults: BTreeMap<String, FaultSpec>,
    ready: Vec<ExecEvent>,
    tokens: u64,
    dropped_messages: u64,
}

impl SimExecutor {
    pub fn new(seed: u64, store: Arc<MetricsStore>) -> Self {
        SimExecutor {
            now: Timestamp::ZERO,
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            store,
            queue: BTreeMap::new(),
            jobs: BTreeMap::new(),
            faults: BTreeMap::new(),
            ready: Vec::new(),
            tokens: 0,
            dropped_messages: 0,
        }
    }

    /// Fires every scheduled effect with time at or before `to`.
    pub fn advance_clock(&mut self, to: Timestamp) -> Vec<ExecEvent> {
        let mut out = Vec::new();
        let target = self.now.max(to);
        let limit = Timestamp(to.0.saturating_add(1));
        loop {
            let batch = self.wait(limit);
            if batch.is_empty() {
                break;
            }
            out.extend(batch);
        }
        self.now = target;
        out
    }

    pub fn phase_of(&self, job: &str) -> Option<Phase> {
        self.jobs.get(job).map(|j| j.phase)
    }

    /// Messages lost to partitions or suspended receivers so far.
    pub fn dropped_messages(&self) -> u64 {
        self.dropped_messages
    }

    /// Whether the simulated network currently carries a message from
    /// `src` to `dst` (service names).
    pub fn link_up(&self, src: &str, dst: &str) -> bool {
        !self.faults.values().any(|f| f.drops(src, dst))
    }

    fn schedule(&mut self, at: Timestamp, item: Item) {
        self.seq += 1;
        self.queue.insert((at, self.seq), item);
    }

    fn host_suspended(&self, host: &str) -> bool {
        self.faults
            .values()
            .any(|f| f.kind == FaultKind::Suspend && f.targets.iter().any(|t| t == host))
    }

    fn finish(&mut self, job: &str, event: ExecEvent) {
        if let Some(j) = self.jobs.get_mut(job) {
            j.phase = event.phase;
            j.epoch += 1;
            j.waiting = None;
            j.deferred.clear();
        }
        self.ready.push(event);
    }

    fn schedule_next_step(&mut self, name: &str) {
        let Some(job) = self.jobs.get(name) else { return };
        if job.waiting.is_some() {
            return;
        }
        if let Some((offset, _)) = job.steps.get(job.cursor) {
            let at = job.anchor.0.saturating_add(offset.saturating_sub(job.anchor.1));
            let epoch = job.epoch;
            self.schedule(
                at,
                Item::Step {
                    job: name.to_string(),
                    epoch,
                },
            );
        } else if job.kind == JobKind::Call && !job.phase.is_terminal() {
            let event = ExecEvent::success(name, self.now);
            self.finish(name, event);
        }
    }

    fn process(&mut self, item: Item) {
        match item {
            Item::Step { job, epoch } => self.run_step(job, epoch),
            Item::Repeat { job, index, epoch } => self.run_repeat(job, index, epoch),
            Item::AwaitTimeout { job, token, epoch } => self.await_timeout(job, token, epoch),
            Item::Deliver { from, to } => self.deliver(from, to),
        }
    }

    fn run_step(&mut self, name: String, epoch: u64) {
        let Some(job) = self.jobs.get(&name) else { return };
        if !job.live(epoch) {
            return;
        }
        if self.host_suspended(&job.host) {
            let job = self.jobs.get_mut(&name).unwrap();
            job.deferred.push(Item::Step {
                job: name.clone(),
                epoch,
            });
            return;
        }
        let (offset, effect) = job.steps[job.cursor].clone();
        let host = job.host.clone();
        let now = self.now;
        {
            let job = self.jobs.get_mut(&name).unwrap();
            job.cursor += 1;
            job.anchor = (now, offset);
        }
        match effect {
            Effect::Emit(e) => self.emit(&e),
            Effect::Send(to) => self.send(&host, &to),
            Effect::Phase(ScriptPhase::Running) => {
                let job = self.jobs.get_mut(&name).unwrap();
                if job.phase == Phase::Pending {
                    job.phase = Phase::Running;
                    self.ready.push(ExecEvent::running(&name, now));
                }
            }
            Effect::Phase(ScriptPhase::Success) => {
                return self.finish(&name, ExecEvent::success(&name, now));
            }
            Effect::Phase(ScriptPhase::Failed) => {
                let event = ExecEvent::failed(&name, now, FailureMode::Crash, "scripted failure");
                return self.finish(&name, event);
            }
            Effect::Crash(reason) => {
                return self.finish(&name, ExecEvent::failed(&name, now, FailureMode::Crash, reason));
            }
            Effect::Await(spec) => {
                let job = self.jobs.get_mut(&name).unwrap();
                match job.inbox.get_mut(&spec.from) {
                    Some(n) if *n > 0 => *n -= 1,
                    _ => {
                        self.tokens += 1;
                        let token = self.tokens;
                        job.waiting = Some((spec.from.clone(), token));
                        let at = now.saturating_add(spec.timeout);
                        self.schedule(
                            at,
                            Item::AwaitTimeout {
                                job: name,
                                token,
                                epoch,
                            },
                        );
                        return;
                    }
                }
            }
        }
        self.schedule_next_step(&name);
    }

    fn run_repeat(&mut self, name: String, index: usize, epoch: u64) {
        let Some(job) = self.jobs.get(&name) else { return };
        if !job.live(epoch) {
            return;
        }
        let r = job.repeats[index].clone();
        let host = job.host.clone();
        let start = job.start;
        if !self.host_suspended(&host) {
            match &r.effect {
                Effect::Emit(e) => self.emit(e),
                Effect::Send(to) => self.send(&host, to),
                _ => unreachable!("checked by SimBehavior::split"),
            }
        }
        let next = self.now.saturating_add(r.every);
        if r.until.is_none_or(|u| next <= start.saturating_add(u)) {
            self.schedule(
                next,
                Item::Repeat {
                    job: name,
                    index,
                    epoch,
                },
            );
        }
    }

    fn await_timeout(&mut self, name: String, token: u64, epoch: u64) {
        let Some(job) = self.jobs.get(&name) else { return };
        if !job.live(epoch) || job.waiting.as_ref().map(|w| w.1) != Some(token) {
            return;
        }
        if self.host_suspended(&job.host) {
            let job = self.jobs.get_mut(&name).unwrap();
            job.deferred.push(Item::AwaitTimeout {
                job: name.clone(),
                token,
                epoch,
            });
            return;
        }
        let from = job.waiting.as_ref().unwrap().0.clone();
        let from_host = self.jobs.get(&from).map_or(from.clone(), |j| j.host.clone());
        let mode = if !self.link_up(&from_host, &job.host) {
            FailureMode::Partition
        } else if self.host_suspended(&from_host) {
            FailureMode::Suspend
        } else {
            FailureMode::Crash
        };
        let event = ExecEvent::failed(
            &name,
            self.now,
            mode,
            format!("timed out waiting for a message from {from}"),
        );
        self.finish(&name, event);
    }

    fn emit(&mut self, e: &EmitSpec) {
        let noise = if e.jitter > 0.0 {
            self.rng.gen_range(-e.jitter..=e.jitter)
        } else {
            0.0
        };
        self.store
            .ingest(MetricPoint::new(e.name.clone(), e.value + noise, self.now));
    }

    fn send(&mut self, from_host: &str, to: &str) {
        let to_host = self.jobs.get(to).map_or(to, |j| j.host.as_str());
        if !self.link_up(from_host, to_host) {
            self.dropped_messages += 1;
            tracing::debug!(from = from_host, to, "message dropped by partition");
            return;
        }
        self.schedule(
            self.now,
            Item::Deliver {
                from: from_host.to_string(),
                to: to.to_string(),
            },
        );
    }

    fn deliver(&mut self, from: String, to: String) {
        let suspended = match self.jobs.get(&to) {
            Some(j) if !j.phase.is_terminal() => self.host_suspended(&j.host),
            _ => {
                self.dropped_messages += 1;
                return;
            }
        };
        if suspended {
            self.dropped_messages += 1;
            return;
        }
        let now = self.now;
        let job = self.jobs.get_mut(&to).unwrap();
        if job.waiting.as_ref().is_some_and(|w| w.0 == from) {
            job.waiting = None;
            let offset = job.anchor.1;
            job.anchor = (now, offset);
            self.schedule_next_step(&to);
        } else {
            *job.inbox.entry(from).or_default() += 1;
        }
    }

    /// Jobs whose host is `service`, including the service job itself.
    fn hosted_on(&self, service: &str) -> Vec<String> {
        self.jobs
            .iter()
            .filter(|(_, j)| j.host == service && !j.phase.is_terminal())
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl Executor for SimExecutor {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn now(&self) -> Timestamp {
        self.now
    }

    fn start_job(&mut self, spec: &JobSpec) -> Result<(), ExecError> {
        if self.jobs.contains_key(&spec.name) {
            return Err(ExecError::DuplicateJob(spec.name.clone()));
        }
        let behavior = spec.sim.clone().unwrap_or_default();
        behavior.check().map_err(|message| ExecError::Spawn {
            job: spec.name.clone(),
            message,
        })?;
        let script = behavior.compile(&mut self.rng);
        let now = self.now;
        let mut job = SimJob {
            kind: spec.kind,
            host: spec.host.clone(),
            phase: Phase::Pending,
            steps: script.steps,
            repeats: script.repeats,
            start: now,
            cursor: 0,
            anchor: (now, Duration::ZERO),
            waiting: None,
            inbox: BTreeMap::new(),
            deferred: Vec::new(),
            epoch: 0,
        };
        if !script.explicit_running {
            job.phase = Phase::Running;
            self.ready.push(ExecEvent::running(&spec.name, now));
        }
        let starts: Vec<Duration> = job.repeats.iter().map(|r| r.start).collect();
        self.jobs.insert(spec.name.clone(), job);
        for (index, start) in starts.into_iter().enumerate() {
            let item = Item::Repeat {
                job: spec.name.clone(),
                index,
                epoch: 0,
            };
            self.schedule(now.saturating_add(start), item);
        }
        self.schedule_next_step(&spec.name);
        Ok(())
    }

    fn stop_job(&mut self, job: &str) -> Result<(), ExecError> {
        let j = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| ExecError::UnknownJob(job.to_string()))?;
        if !j.phase.is_terminal() {
            j.phase = Phase::Success;
            j.epoch += 1;
            j.waiting = None;
            j.deferred.clear();
        }
        Ok(())
    }

    fn inject_fault(&mut self, fault: &FaultSpec) -> Result<(), ExecError> {
        fault.check()?;
        if self.faults.contains_key(&fault.id) {
            return Err(ExecError::InvalidFault(format!("{}: handle already active", fault.id)));
        }
        for t in &fault.targets {
            match self.jobs.get(t) {
                Some(j) if j.phase == Phase::Running => {}
                _ => return Err(ExecError::TargetNotRunning(t.clone())),
            }
        }
        let now = self.now;
        if fault.kind == FaultKind::Kill {
            for t in &fault.targets {
                for job in self.hosted_on(t) {
                    let event = if &job == t {
                        ExecEvent::failed(&job, now, FailureMode::Kill, format!("killed by {}", fault.id))
                    } else {
                        ExecEvent::failed(&job, now, FailureMode::Crash, format!("host {t} was killed"))
                    };
                    self.finish(&job, event);
                }
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
            let resumed: BTreeSet<String> = fault
                .targets
                .iter()
                .filter(|t| !self.host_suspended(t))
                .cloned()
                .collect();
            let now = self.now;
            let mut items = Vec::new();
            for job in self.jobs.values_mut() {
                if resumed.contains(&job.host) {
                    items.append(&mut job.deferred);
                }
            }
            for item in items {
                self.schedule(now, item);
            }
        }
        Ok(())
    }

    fn wait(&mut self, deadline: Timestamp) -> Vec<ExecEvent> {
        loop {
            if !self.ready.is_empty() {
                return std::mem::take(&mut self.ready);
            }
            let next = self.queue.first_key_value().map(|(k, _)| k.0);
            match next {
                Some(t) if t < deadline => {
                    self.now = self.now.max(t);
                    while let Some(entry) = self.queue.first_entry() {
                        if entry.key().0 != t {
                            break;
                        }
                        let item = entry.remove();
                        self.process(item);
                    }
                }
                _ => {
                    self.now = self.now.max(deadline);
                    return Vec::new();
                }
            }
        }
    }
}
