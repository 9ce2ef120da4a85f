use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::{fire_tag_event, EngineState, Event, Outcome, ReconcileCommand, RunTrace, TimerId};
use crate::dsl::resolve::resolve;
use crate::dsl::{validate, ScenarioDoc, TemplateLibrary, ValidationReport};
use crate::executors::sim::SimExecutor;
use crate::executors::{ExecEvent, Executor};
use crate::lifecycle::{FailureMode, Phase, ResourceTree};
use crate::telemetry::{AnnotationLog, CheckpointRegistry, MetricsStore};
use crate::time::Timestamp;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Recorded in the trace; the executor is seeded by its creator.
    pub seed: u64,
    /// Period of metric assertion evaluation.
    pub tick: Duration,
    /// Replaces the built-in one-hour fallback timeout.
    pub default_timeout: Option<Duration>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            tick: Duration::from_secs(1),
            default_timeout: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario failed validation with {} error(s)", .0.errors().count())]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: Outcome,
    pub reason: String,
    pub trace: RunTrace,
    pub tree: ResourceTree,
    pub checkpoints: CheckpointRegistry,
    pub annotations: AnnotationLog,
}

#[derive(Default)]
struct EventQueue {
    items: BTreeMap<(Timestamp, u64), Event>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, mut ev: Event, floor: Timestamp) {
        self.seq += 1;
        ev.at = ev.at.max(floor);
        ev.seq = self.seq;
        self.items.insert((ev.at, ev.seq), ev);
    }

    fn pop(&mut self) -> Option<Event> {
        self.items.pop_first().map(|(_, ev)| ev)
    }
}

fn timer_subject(scenario: &str, timer: &TimerId) -> String {
    match timer {
        TimerId::Start => scenario.to_string(),
        TimerId::After { action } | TimerId::Timeout { action } => action.clone(),
        TimerId::Revoke { fault } => fault.clone(),
    }
}

/// Validates `doc` and runs it to completion on `executor`.
///
/// Metrics reach the engine through `store`, which the executor must share.
pub fn run_scenario(
    doc: &ScenarioDoc,
    templates: &TemplateLibrary,
    executor: &mut dyn Executor,
    store: Arc<MetricsStore>,
    opts: &RunOptions,
) -> Result<RunResult, RunError> {
    let report = validate(doc, templates);
    if !report.ok {
        return Err(RunError::Invalid(report));
    }
    let (plan, _) = resolve(doc, templates);
    let plan = plan.expect("validated scenarios resolve");
    let mut state = EngineState::new(plan, store, executor.now(), executor.name(), opts.seed);
    if let Some(d) = opts.default_timeout {
        state.set_default_timeout(d);
    }
    for f in &report.findings {
        state.warn(f.to_string());
    }
    let scenario = doc.name.clone();
    let tick = opts.tick.max(Duration::from_millis(1));
    let mut queue = EventQueue::default();
    queue.push(Event::time(state.now(), &scenario, TimerId::Start), state.now());
    let mut next_tick = state.now().saturating_add(tick);

    while state.outcome().is_none() {
        if let Some(ev) = queue.pop() {
            let commands = state.reconcile(&ev);
            execute(&commands, executor, &mut state, &mut queue);
            continue;
        }
        let now = executor.now().max(state.now());
        let due = state.take_due_timers(now);
        if !due.is_empty() {
            for (at, timer) in due {
                let subject = timer_subject(&scenario, &timer);
                queue.push(Event::time(at, &subject, timer), state.now());
            }
            continue;
        }
        let watching = state.active_metric_assertions();
        if !watching.is_empty() && now >= next_tick {
            state.set_now(now);
            for i in watching {
                if let Some(ev) = state.evaluate_metric_assertion(i) {
                    queue.push(ev, state.now());
                }
            }
            next_tick = now.saturating_add(tick);
            continue;
        }
        if watching.is_empty() && next_tick <= now {
            next_tick = now.saturating_add(tick);
        }
        let mut deadline = state.next_timer().unwrap_or(Timestamp::MAX);
        if !watching.is_empty() {
            deadline = deadline.min(next_tick);
        }
        let events = executor.wait(deadline);
        if events.is_empty() && deadline == Timestamp::MAX {
            let commands = state.halt(Outcome::Aborted, "stalled: nothing left to wait for");
            execute(&commands, executor, &mut state, &mut queue);
            break;
        }
        for e in events {
            queue.push(exec_event(e), state.now());
        }
    }

    let (outcome, reason) = state
        .outcome()
        .map(|(o, r)| (o, r.to_string()))
        .expect("loop ends with an outcome");
    let tree = state.tree.clone();
    let checkpoints = state.checkpoints.clone();
    let annotations = state.annotations.clone();
    Ok(RunResult {
        outcome,
        reason,
        trace: state.into_trace(),
        tree,
        checkpoints,
        annotations,
    })
}

fn exec_event(e: ExecEvent) -> Event {
    Event::state(e.at, &e.job, e.phase, e.mode, e.reason)
}

/// Carries out the executor-facing commands of one cycle. Failures come
/// back as state events so the next cycle can classify them.
fn execute(
    commands: &[ReconcileCommand],
    executor: &mut dyn Executor,
    state: &mut EngineState,
    queue: &mut EventQueue,
) {
    let now = state.now();
    for cmd in commands {
        match cmd {
            ReconcileCommand::CreateJob { job, .. } => {
                let Some(spec) = state.job_spec(job).cloned() else {
                    state.warn(format!("no job definition for {job}"));
                    continue;
                };
                if let Err(e) = executor.start_job(&spec) {
                    let reason = e.to_string();
                    queue.push(
                        Event::state(now, job, Phase::Failed, Some(FailureMode::Crash), Some(reason)),
                        now,
                    );
                }
            }
            ReconcileCommand::KillJob { job, .. } => {
                if let Err(e) = executor.stop_job(job) {
                    state.warn(format!("stopping {job}: {e}"));
                }
            }
            ReconcileCommand::InjectFault { fault } => {
                if let Err(e) = executor.inject_fault(fault) {
                    let action = fault.id.split('/').next().unwrap_or(&fault.id);
                    let reason = format!("injecting {}: {e}", fault.id);
                    queue.push(Event::state(now, action, Phase::Failed, None, Some(reason)), now);
                }
            }
            ReconcileCommand::RevokeFault { fault } => {
                if let Err(e) = executor.revoke_fault(fault) {
                    tracing::debug!("revoking {fault}: {e}");
                }
            }
            ReconcileCommand::Tag { payload, .. } => {
                let source = payload.get("source").map_or("", String::as_str);
                queue.push(fire_tag_event(source, payload.clone()), now);
            }
            _ => {}
        }
    }
}

/// Runs a scenario on a fresh simulated executor.
pub fn run_sim(doc: &ScenarioDoc, templates: &TemplateLibrary, seed: u64) -> Result<RunResult, RunError> {
    let store = Arc::new(MetricsStore::new());
    let mut exec = SimExecutor::new(seed, store.clone());
    let opts = RunOptions {
        seed,
        ..RunOptions::default()
    };
    run_scenario(doc, templates, &mut exec, store, &opts)
}
