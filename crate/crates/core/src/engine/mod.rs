//! Reconciliation engine.
//!
//! Every occurrence (a timer, a job changing phase, an alert firing, a tag
//! notification) becomes an [`Event`]. [`reconcile`] applies one event to
//! the [`EngineState`] and returns the commands of that cycle. Bookkeeping
//! commands (transitions, tags, timers, annotations, snapshots) are applied
//! while reconciling; commands that reach the executor are carried out by
//! the run loop afterwards, in order.

mod run;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dsl::resolve::{Assertion, ResolvedBody, ResolvedScenario};
use crate::dsl::{ActionKind, DependsClause, ENGINE_DEFAULT_TIMEOUT};
use crate::executors::{FaultSpec, JobSpec};
use crate::expressions::{eval_metrics, eval_state, Expression, ScopeSnapshot};
use crate::lifecycle::{
    classify_failure, ChaosTag, FailureClass, FailureMode, FaultKind, LifecycleError, NodeId, NodeKind, Phase,
    ResourceTree, TransitionRecord, CHAOS_TAG_KEY,
};
use crate::telemetry::{Annotation, AnnotationLog, CheckpointRegistry, MetricsStore};
use crate::time::{format_duration, Timestamp};

pub use run::{run_scenario, run_sim, RunError, RunOptions, RunResult};
pub use trace::{ActionInfo, AnnotationOp, RecordBody, RunTrace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failed,
    Aborted,
}

impl Outcome {
    /// Process exit code reported by the command-line driver.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Failed => 1,
            Outcome::Aborted => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TimerId {
    Start,
    After { action: String },
    Timeout { action: String },
    Revoke { fault: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EventPayload {
    Time {
        timer: TimerId,
    },
    State {
        phase: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<FailureMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Metrics {
        assertion: usize,
        expression: String,
        value: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Tag {
        payload: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at: Timestamp,
    pub seq: u64,
    pub subject: String,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl Event {
    pub fn time(at: Timestamp, subject: &str, timer: TimerId) -> Self {
        Event {
            at,
            seq: 0,
            subject: subject.to_string(),
            payload: EventPayload::Time { timer },
        }
    }

    pub fn state(
        at: Timestamp,
        subject: &str,
        phase: Phase,
        mode: Option<FailureMode>,
        reason: Option<String>,
    ) -> Self {
        Event {
            at,
            seq: 0,
            subject: subject.to_string(),
            payload: EventPayload::State { phase, mode, reason },
        }
    }
}

/// Builds the notification a chaos controller sends when it tags a target.
/// The loop stamps time and sequence number when enqueuing it.
pub fn fire_tag_event(src: &str, payload: BTreeMap<String, String>) -> Event {
    Event {
        at: Timestamp::ZERO,
        seq: 0,
        subject: src.to_string(),
        payload: EventPayload::Tag { payload },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb")]
pub enum ReconcileCommand {
    CreateJob {
        job: String,
        action: String,
    },
    KillJob {
        job: String,
        teardown: bool,
    },
    InjectFault {
        fault: FaultSpec,
    },
    RevokeFault {
        fault: String,
    },
    Snapshot {
        checkpoint: String,
    },
    Annotate {
        op: AnnotationOp,
        label: String,
    },
    Transition {
        node: String,
        to: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Tag {
        target: String,
        payload: BTreeMap<String, String>,
    },
    ArmTimer {
        timer: TimerId,
        at: Timestamp,
    },
    AbortRun {
        outcome: Outcome,
        reason: String,
    },
    Finish {
        reason: String,
    },
}

impl ReconcileCommand {
    /// Commands the run loop must carry out against the executor.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            ReconcileCommand::CreateJob { .. }
                | ReconcileCommand::KillJob { .. }
                | ReconcileCommand::InjectFault { .. }
                | ReconcileCommand::RevokeFault { .. }
        )
    }
}

/// Whether `clause` holds: every `running` target is Running or Success,
/// every `success` target is Success, and `after` has elapsed since the
/// lists were first satisfied (`satisfied_since`).
pub fn dependency_satisfied(
    clause: &DependsClause,
    tree: &ResourceTree,
    now: Timestamp,
    satisfied_since: Option<Timestamp>,
) -> bool {
    if !lists_satisfied(clause, tree) {
        return false;
    }
    match clause.after {
        None => true,
        Some(after) => satisfied_since.is_some_and(|since| now >= since.saturating_add(after)),
    }
}

fn lists_satisfied(clause: &DependsClause, tree: &ResourceTree) -> bool {
    let phase = |n: &String| tree.node(n).map(|n| n.phase);
    clause
        .running
        .iter()
        .all(|n| matches!(phase(n), Some(Phase::Running | Phase::Success)))
        && clause.success.iter().all(|n| phase(n) == Some(Phase::Success))
}

#[derive(Debug, Clone, Default)]
struct ActionRuntime {
    dispatched: bool,
    satisfied_since: Option<Timestamp>,
    after_armed: bool,
    timeout_armed: bool,
    settled: bool,
    final_checked: bool,
}

#[derive(Debug, Clone)]
struct ActiveFault {
    action: String,
    spec: FaultSpec,
}

/// Everything the loop owns between cycles.
pub struct EngineState {
    plan: ResolvedScenario,
    pub tree: ResourceTree,
    store: Arc<MetricsStore>,
    pub checkpoints: CheckpointRegistry,
    pub annotations: AnnotationLog,
    runtime: Vec<ActionRuntime>,
    jobs: BTreeMap<String, JobSpec>,
    created: BTreeSet<String>,
    /// Call jobs waiting for their host service to come up.
    held: BTreeMap<String, (String, String)>,
    faults: BTreeMap<String, ActiveFault>,
    timers: BTreeMap<(Timestamp, u64), TimerId>,
    timer_seq: u64,
    default_timeout: Duration,
    now: Timestamp,
    cycle: u64,
    outcome: Option<(Outcome, String)>,
    trace: RunTrace,
}

impl EngineState {
    pub fn new(plan: ResolvedScenario, store: Arc<MetricsStore>, now: Timestamp, executor: &str, seed: u64) -> Self {
        let tree = plan.build_tree();
        let jobs = plan
            .actions
            .iter()
            .flat_map(|a| match &a.body {
                ResolvedBody::Services(jobs) | ResolvedBody::Call(jobs) => jobs.clone(),
                _ => Vec::new(),
            })
            .map(|j| (j.name.clone(), j))
            .collect();
        for spec in plan.services.values() {
            for m in &spec.metrics {
                store.declare(m);
            }
        }
        let mut trace = RunTrace::new();
        trace.push(
            0,
            now,
            RecordBody::Start {
                scenario: plan.doc.name.clone(),
                executor: executor.to_string(),
                seed,
                actions: plan
                    .actions
                    .iter()
                    .map(|a| ActionInfo {
                        name: a.name.clone(),
                        kind: a.kind,
                    })
                    .collect(),
            },
        );
        let runtime = vec![ActionRuntime::default(); plan.actions.len()];
        let mut state = EngineState {
            plan,
            tree,
            store,
            checkpoints: CheckpointRegistry::default(),
            annotations: AnnotationLog::default(),
            runtime,
            jobs,
            created: BTreeSet::new(),
            held: BTreeMap::new(),
            faults: BTreeMap::new(),
            timers: BTreeMap::new(),
            timer_seq: 0,
            default_timeout: ENGINE_DEFAULT_TIMEOUT,
            now,
            cycle: 0,
            outcome: None,
            trace,
        };
        let root = state.tree.root();
        let records = state.tree.advance(root, Phase::Pending).expect("fresh root");
        state.record_transitions(records);
        state
    }

    /// Fallback timeout for actions when neither they nor the scenario set one.
    pub fn set_default_timeout(&mut self, d: Duration) {
        self.default_timeout = d;
    }

    pub fn plan(&self) -> &ResolvedScenario {
        &self.plan
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Moves the engine clock forward (never back).
    pub fn set_now(&mut self, now: Timestamp) {
        self.now = self.now.max(now);
    }

    /// Ends the run from outside a reconciliation cycle, e.g. when the
    /// executor has nothing left to report.
    pub fn halt(&mut self, outcome: Outcome, reason: impl Into<String>) -> Vec<ReconcileCommand> {
        self.cycle += 1;
        let mut out = Vec::new();
        self.abort(&mut out, outcome, reason.into());
        out
    }

    pub fn outcome(&self) -> Option<(Outcome, &str)> {
        self.outcome.as_ref().map(|(o, r)| (*o, r.as_str()))
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }

    pub fn job_spec(&self, job: &str) -> Option<&JobSpec> {
        self.jobs.get(job)
    }

    pub fn next_timer(&self) -> Option<Timestamp> {
        self.timers.keys().next().map(|k| k.0)
    }

    /// Removes and returns the timers due at or before `now`.
    pub fn take_due_timers(&mut self, now: Timestamp) -> Vec<(Timestamp, TimerId)> {
        let mut due = Vec::new();
        while let Some(entry) = self.timers.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let at = entry.key().0;
            due.push((at, entry.remove()));
        }
        due
    }

    pub fn effective_timeout(&self, action: &str) -> Duration {
        self.plan
            .doc
            .action(action)
            .and_then(|a| a.timeout)
            .or(self.plan.doc.defaults.timeout)
            .unwrap_or(self.default_timeout)
    }

    /// Records a free-standing warning, e.g. from the run loop.
    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!("{message}");
        self.trace.push(self.cycle, self.now, RecordBody::Warning { message });
    }

    /// Metric assertions whose owner is live, with their indices.
    pub fn active_metric_assertions(&self) -> Vec<usize> {
        if self.outcome.is_some() {
            return Vec::new();
        }
        self.plan
            .assertions
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a.expr, Expression::Metrics(_)))
            .filter(|(_, a)| self.owner_is_live(&a.owner))
            .map(|(i, _)| i)
            .collect()
    }

    fn owner_is_live(&self, owner: &str) -> bool {
        let Some(i) = self.action_index(owner) else {
            return false;
        };
        self.runtime[i].dispatched && !self.runtime[i].final_checked
    }

    /// Evaluates metric assertion `index` now and wraps the result as an
    /// event. Returns `None` for a quiet evaluation.
    pub fn evaluate_metric_assertion(&self, index: usize) -> Option<Event> {
        let a = &self.plan.assertions[index];
        let Expression::Metrics(m) = &a.expr else {
            return None;
        };
        let (value, error) = match eval_metrics(m, self.store.as_ref(), self.now, &self.checkpoints) {
            Ok(false) => return None,
            Ok(true) => (true, None),
            Err(e) => (false, Some(e.to_string())),
        };
        Some(Event {
            at: self.now,
            seq: 0,
            subject: a.owner.clone(),
            payload: EventPayload::Metrics {
                assertion: index,
                expression: a.text.clone(),
                value,
                error,
            },
        })
    }

    fn action_index(&self, name: &str) -> Option<usize> {
        self.plan.actions.iter().position(|a| a.name == name)
    }

    fn record(&mut self, body: RecordBody) {
        self.trace.push(self.cycle, self.now, body);
    }

    fn record_transitions(&mut self, records: Vec<TransitionRecord>) {
        for t in records {
            tracing::debug!(node = %t.node, from = %t.from, to = %t.to, "transition");
            self.record(RecordBody::Transition { transition: t });
        }
    }

    fn emit(&mut self, out: &mut Vec<ReconcileCommand>, cmd: ReconcileCommand) {
        self.record(RecordBody::Command { command: cmd.clone() });
        out.push(cmd);
    }

    fn id(&self, name: &str) -> Result<NodeId, LifecycleError> {
        self.tree
            .id(name)
            .ok_or_else(|| LifecycleError::UnknownNode(name.to_string()))
    }

    /// Engine-initiated move of `name` to `to`, then re-aggregation upward.
    fn drive(&mut self, out: &mut Vec<ReconcileCommand>, name: &str, to: Phase) -> Result<(), LifecycleError> {
        let id = self.id(name)?;
        if self.tree.get(id).phase == to {
            return Ok(());
        }
        self.emit(
            out,
            ReconcileCommand::Transition {
                node: name.to_string(),
                to,
                reason: None,
            },
        );
        let records = self.tree.advance(id, to)?;
        self.record_transitions(records);
        let records = self.tree.propagate(id)?;
        self.record_transitions(records);
        Ok(())
    }

    fn fail(
        &mut self,
        out: &mut Vec<ReconcileCommand>,
        id: NodeId,
        class: FailureClass,
        reason: &str,
        command: bool,
    ) -> Result<(), LifecycleError> {
        if command {
            self.emit(
                out,
                ReconcileCommand::Transition {
                    node: self.tree.get(id).name.clone(),
                    to: Phase::Failed,
                    reason: Some(reason.to_string()),
                },
            );
        }
        let records = self.tree.fail(id, class, reason)?;
        self.record_transitions(records);
        self.drop_tag(id);
        let records = self.tree.propagate(id)?;
        self.record_transitions(records);
        Ok(())
    }

    /// The tag's lifetime ends when its node terminates.
    fn drop_tag(&mut self, id: NodeId) {
        let node = self.tree.get(id);
        if node.kind == NodeKind::Service && node.meta.contains_key(CHAOS_TAG_KEY) {
            let name = node.name.clone();
            let _ = self.tree.revoke_chaos_tag(&name);
            self.record(RecordBody::Tag {
                target: name,
                payload: BTreeMap::new(),
                applied: false,
            });
        }
    }

    fn arm(&mut self, out: &mut Vec<ReconcileCommand>, at: Timestamp, timer: TimerId) {
        self.emit(
            out,
            ReconcileCommand::ArmTimer {
                timer: timer.clone(),
                at,
            },
        );
        self.timer_seq += 1;
        self.timers.insert((at, self.timer_seq), timer);
    }

    fn annotate(&mut self, out: &mut Vec<ReconcileCommand>, op: AnnotationOp, label: &str) {
        self.emit(
            out,
            ReconcileCommand::Annotate {
                op,
                label: label.to_string(),
            },
        );
        let annotation = match op {
            AnnotationOp::Point => {
                let a = Annotation::point(label, self.now);
                self.annotations.annotate(a.clone());
                a
            }
            AnnotationOp::Open => {
                let a = Annotation::region(label, self.now);
                self.annotations.annotate(a.clone());
                a
            }
            AnnotationOp::Close => match self.annotations.close_region(label, self.now) {
                Ok(a) => a.clone(),
                Err(e) => {
                    self.warn(e.to_string());
                    return;
                }
            },
        };
        self.record(RecordBody::Annotation { op, annotation });
    }

    /// One reconciliation cycle.
    pub fn reconcile(&mut self, ev: &Event) -> Vec<ReconcileCommand> {
        self.cycle += 1;
        self.now = self.now.max(ev.at);
        self.record(RecordBody::Event { event: ev.clone() });
        let mut out = Vec::new();
        if self.outcome.is_some() {
            return out;
        }
        if let Err(e) = self.handle(&mut out, ev).and_then(|_| self.settle(&mut out)) {
            self.abort(&mut out, Outcome::Aborted, format!("engine error: {e}"));
        }
        out
    }

    fn handle(&mut self, out: &mut Vec<ReconcileCommand>, ev: &Event) -> Result<(), LifecycleError> {
        match &ev.payload {
            EventPayload::Time { timer } => match timer {
                TimerId::Start | TimerId::After { .. } => {}
                TimerId::Timeout { action } => {
                    let i = self
                        .action_index(action)
                        .ok_or_else(|| LifecycleError::UnknownNode(action.clone()))?;
                    if !self.runtime[i].settled {
                        let limit = format_duration(self.effective_timeout(action));
                        self.abort(
                            out,
                            Outcome::Aborted,
                            format!("timeout: {action} did not settle within {limit}"),
                        );
                    }
                }
                TimerId::Revoke { fault } => {
                    if self.faults.contains_key(fault) {
                        self.finish_fault(out, fault)?;
                    }
                }
            },
            EventPayload::State { phase, mode, reason } => {
                self.on_state(out, &ev.subject, *phase, *mode, reason.as_deref())?
            }
            EventPayload::Metrics {
                assertion,
                expression,
                value,
                error,
            } => {
                if let Some(e) = error {
                    let owner = ev.subject.clone();
                    self.record(RecordBody::Assertion {
                        owner: owner.clone(),
                        expression: expression.clone(),
                        fired: false,
                        error: Some(e.clone()),
                    });
                    self.abort(
                        out,
                        Outcome::Aborted,
                        format!("assertion on {owner} could not be evaluated: {e}"),
                    );
                } else if *value {
                    self.assertion_fired(out, *assertion)?;
                }
            }
            EventPayload::Tag { payload } => {
                if let Some(target) = payload.get("target") {
                    if self.tree.id(target).is_none() {
                        self.warn(format!("tag event from {} for unknown target {target}", ev.subject));
                    }
                }
            }
        }
        Ok(())
    }

    fn on_state(
        &mut self,
        out: &mut Vec<ReconcileCommand>,
        subject: &str,
        phase: Phase,
        mode: Option<FailureMode>,
        reason: Option<&str>,
    ) -> Result<(), LifecycleError> {
        let Some(id) = self.tree.id(subject) else {
            self.warn(format!("state event for unknown resource {subject}"));
            return Ok(());
        };
        let node = self.tree.get(id);
        if node.phase.is_terminal() || node.phase == phase || node.phase.path_to(phase).is_none() {
            return Ok(());
        }
        if phase == Phase::Failed {
            let observed = mode.unwrap_or(FailureMode::Crash);
            let class = match node.kind {
                NodeKind::Service => classify_failure(node, observed),
                _ => FailureClass::Unexpected,
            };
            let reason = reason.unwrap_or("failed").to_string();
            if node.kind == NodeKind::Chaos {
                self.discard_faults_of(out, subject);
            }
            self.fail(out, id, class, &reason, false)?;
        } else {
            let records = self.tree.advance(id, phase)?;
            self.record_transitions(records);
            let records = self.tree.propagate(id)?;
            self.record_transitions(records);
        }
        self.complete_kill_faults(out)
    }

    /// Kill faults end once every target has terminated.
    fn complete_kill_faults(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        let done: Vec<String> = self
            .faults
            .iter()
            .filter(|(_, f)| f.spec.kind == FaultKind::Kill)
            .filter(|(_, f)| {
                f.spec
                    .targets
                    .iter()
                    .all(|t| self.tree.node(t).is_some_and(|n| n.phase.is_terminal()))
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in done {
            self.finish_fault(out, &id)?;
        }
        Ok(())
    }

    /// Faults of a chaos action that failed before taking effect.
    fn discard_faults_of(&mut self, out: &mut Vec<ReconcileCommand>, action: &str) {
        let ids: Vec<String> = self
            .faults
            .iter()
            .filter(|(_, f)| f.action == action)
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            let f = self.faults.remove(&id).unwrap();
            self.untag_targets(&f);
            self.annotate(out, AnnotationOp::Close, &id);
        }
    }

    fn untag_targets(&mut self, f: &ActiveFault) {
        for t in &f.spec.targets {
            let tagged_by_us = self
                .tree
                .node(t)
                .and_then(|n| n.chaos_tag())
                .is_some_and(|tag| tag.source == f.action);
            if tagged_by_us {
                if let Some(id) = self.tree.id(t) {
                    self.drop_tag(id);
                }
            }
        }
    }

    fn finish_fault(&mut self, out: &mut Vec<ReconcileCommand>, id: &str) -> Result<(), LifecycleError> {
        let Some(f) = self.faults.remove(id) else {
            return Ok(());
        };
        self.emit(out, ReconcileCommand::RevokeFault { fault: id.to_string() });
        self.untag_targets(&f);
        self.annotate(out, AnnotationOp::Close, id);
        if !self.faults.values().any(|g| g.action == f.action) {
            let node = self.tree.node(&f.action).map(|n| n.phase);
            if node == Some(Phase::Running) {
                self.drive(out, &f.action, Phase::Success)?;
            }
        }
        Ok(())
    }

    fn assertion_fired(&mut self, out: &mut Vec<ReconcileCommand>, index: usize) -> Result<(), LifecycleError> {
        let Assertion { owner, text, .. } = self.plan.assertions[index].clone();
        self.record(RecordBody::Assertion {
            owner: owner.clone(),
            expression: text.clone(),
            fired: true,
            error: None,
        });
        let reason = format!("assertion failed: {text}");
        let owner_id = self.id(&owner)?;
        let target = if self.tree.get(owner_id).phase.is_terminal() {
            self.tree.root()
        } else {
            owner_id
        };
        if !self.tree.get(target).phase.is_terminal() {
            self.fail(out, target, FailureClass::Unexpected, &reason, true)?;
        }
        Ok(())
    }

    /// Evaluates one assertion immediately. Returns whether it fired.
    fn check_assertion(
        &mut self,
        out: &mut Vec<ReconcileCommand>,
        index: usize,
        record_quiet: bool,
    ) -> Result<bool, LifecycleError> {
        let a = &self.plan.assertions[index];
        let fired = match &a.expr {
            Expression::State(s) => {
                let scope = ScopeSnapshot::capture(&self.tree, &a.owner, &s.scope_refs());
                eval_state(s, &scope)
            }
            Expression::Metrics(_) => match self.evaluate_metric_assertion(index) {
                None => false,
                Some(Event {
                    payload: EventPayload::Metrics { error: Some(e), .. },
                    ..
                }) => {
                    let owner = a.owner.clone();
                    self.abort(
                        out,
                        Outcome::Aborted,
                        format!("assertion on {owner} could not be evaluated: {e}"),
                    );
                    return Ok(false);
                }
                Some(_) => true,
            },
        };
        if fired {
            self.assertion_fired(out, index)?;
        } else if record_quiet {
            let a = &self.plan.assertions[index];
            self.record(RecordBody::Assertion {
                owner: a.owner.clone(),
                expression: a.text.clone(),
                fired: false,
                error: None,
            });
        }
        Ok(fired)
    }

    /// Completion checks, dispatching, abort and quiescence handling.
    fn settle(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        loop {
            if self.outcome.is_some() {
                return Ok(());
            }
            self.check_live_state_assertions(out)?;
            self.release_held(out)?;
            self.bookkeep(out)?;
            if self.root_failed(out) {
                return Ok(());
            }
            if !self.dispatch_ready(out)? {
                break;
            }
        }
        if self.root_failed(out) {
            return Ok(());
        }
        self.quiesce(out)
    }

    fn check_live_state_assertions(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        let live: Vec<usize> = self
            .plan
            .assertions
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a.expr, Expression::State(_)) && self.owner_is_live(&a.owner))
            .filter(|(_, a)| self.tree.node(&a.owner).is_some_and(|n| !n.phase.is_terminal()))
            .map(|(i, _)| i)
            .collect();
        for i in live {
            if self.outcome.is_some() {
                break;
            }
            self.check_assertion(out, i, false)?;
        }
        Ok(())
    }

    /// Marks settled actions, closes call regions and runs the one-off
    /// assertion check of actions that just finished.
    fn bookkeep(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        for i in 0..self.plan.actions.len() {
            let (name, kind) = (self.plan.actions[i].name.clone(), self.plan.actions[i].kind);
            let phase = self.tree.node(&name).map_or(Phase::Uninitialized, |n| n.phase);
            let rt = &mut self.runtime[i];
            if !rt.dispatched {
                continue;
            }
            if !rt.settled && (phase.is_terminal() || (kind.is_long_running() && phase == Phase::Running)) {
                rt.settled = true;
            }
            if phase.is_terminal() && !rt.final_checked {
                rt.final_checked = true;
                if kind == ActionKind::Call {
                    self.annotate(out, AnnotationOp::Close, &name);
                }
                self.final_assertions(out, &name)?;
            }
        }
        Ok(())
    }

    fn final_assertions(&mut self, out: &mut Vec<ReconcileCommand>, owner: &str) -> Result<(), LifecycleError> {
        let indices: Vec<usize> = (0..self.plan.assertions.len())
            .filter(|&i| self.plan.assertions[i].owner == owner)
            .collect();
        for i in indices {
            if self.outcome.is_some() {
                break;
            }
            self.check_assertion(out, i, true)?;
        }
        Ok(())
    }

    fn root_failed(&mut self, out: &mut Vec<ReconcileCommand>) -> bool {
        let root = self.tree.get(self.tree.root());
        if root.phase != Phase::Failed {
            return false;
        }
        let reason = root
            .failure_reason
            .clone()
            .unwrap_or_else(|| "scenario failed".to_string());
        self.abort(out, Outcome::Failed, reason);
        true
    }

    /// Dispatches every ready action in document order. Returns whether
    /// anything was dispatched.
    fn dispatch_ready(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<bool, LifecycleError> {
        let mut progressed = false;
        for i in 0..self.plan.actions.len() {
            if self.outcome.is_some() {
                break;
            }
            let name = self.plan.actions[i].name.clone();
            let depends = self
                .plan
                .doc
                .action(&name)
                .map(|a| a.depends.clone())
                .unwrap_or_default();
            if !self.runtime[i].timeout_armed && depends.targets().all(|t| self.is_dispatched(t)) {
                self.runtime[i].timeout_armed = true;
                let at = self.now.saturating_add(self.effective_timeout(&name));
                self.arm(out, at, TimerId::Timeout { action: name.clone() });
            }
            if self.runtime[i].dispatched || !lists_satisfied(&depends, &self.tree) {
                continue;
            }
            let since = *self.runtime[i].satisfied_since.get_or_insert(self.now);
            if dependency_satisfied(&depends, &self.tree, self.now, Some(since)) {
                self.runtime[i].dispatched = true;
                self.dispatch(out, i)?;
                progressed = true;
            } else if !self.runtime[i].after_armed {
                self.runtime[i].after_armed = true;
                let at = since.saturating_add(depends.after.unwrap_or_default());
                self.arm(out, at, TimerId::After { action: name });
            }
        }
        Ok(progressed)
    }

    fn is_dispatched(&self, action: &str) -> bool {
        self.action_index(action).is_some_and(|i| self.runtime[i].dispatched)
    }

    fn create_job(&mut self, out: &mut Vec<ReconcileCommand>, job: &str, action: &str) {
        self.created.insert(job.to_string());
        self.emit(
            out,
            ReconcileCommand::CreateJob {
                job: job.to_string(),
                action: action.to_string(),
            },
        );
    }

    /// Starts held call jobs whose host is Running; fails those whose host
    /// can no longer come up.
    fn release_held(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        let held: Vec<(String, String, String)> = self
            .held
            .iter()
            .map(|(job, (action, host))| (job.clone(), action.clone(), host.clone()))
            .collect();
        for (job, action, host) in held {
            let phase = self.tree.node(&host).map_or(Phase::Failed, |n| n.phase);
            if phase == Phase::Running {
                self.held.remove(&job);
                self.create_job(out, &job, &action);
            } else if phase.is_terminal() {
                self.held.remove(&job);
                let id = self.id(&job)?;
                let reason = format!("service {host} is not running");
                self.fail(out, id, FailureClass::Unexpected, &reason, true)?;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, out: &mut Vec<ReconcileCommand>, index: usize) -> Result<(), LifecycleError> {
        let action = self.plan.actions[index].clone();
        let name = action.name.as_str();
        tracing::debug!(action = name, at = %self.now, "dispatch");
        self.drive(out, name, Phase::Pending)?;
        match &action.body {
            ResolvedBody::Services(jobs) => {
                for j in jobs {
                    if j.name != name {
                        self.drive(out, &j.name, Phase::Pending)?;
                    }
                    self.create_job(out, &j.name, name);
                    self.annotate(out, AnnotationOp::Point, &j.name);
                }
            }
            ResolvedBody::Call(jobs) => {
                self.annotate(out, AnnotationOp::Open, name);
                for j in jobs {
                    self.drive(out, &j.name, Phase::Pending)?;
                    self.held.insert(j.name.clone(), (name.to_string(), j.host.clone()));
                }
                self.release_held(out)?;
            }
            ResolvedBody::Chaos(faults) => {
                for f in faults {
                    for t in &f.targets {
                        let tag = ChaosTag {
                            fault: f.kind,
                            source: name.to_string(),
                        };
                        let payload = BTreeMap::from([
                            (CHAOS_TAG_KEY.to_string(), f.kind.as_str().to_string()),
                            ("source".to_string(), name.to_string()),
                            ("target".to_string(), t.clone()),
                        ]);
                        self.emit(
                            out,
                            ReconcileCommand::Tag {
                                target: t.clone(),
                                payload: payload.clone(),
                            },
                        );
                        self.tree.tag_chaos_target(t, &tag)?;
                        self.record(RecordBody::Tag {
                            target: t.clone(),
                            payload,
                            applied: true,
                        });
                    }
                    self.emit(out, ReconcileCommand::InjectFault { fault: f.clone() });
                    self.annotate(out, AnnotationOp::Open, &f.id);
                    self.faults.insert(
                        f.id.clone(),
                        ActiveFault {
                            action: name.to_string(),
                            spec: f.clone(),
                        },
                    );
                }
                self.drive(out, name, Phase::Running)?;
                for f in faults {
                    if let Some(d) = f.duration {
                        let at = self.now.saturating_add(d);
                        self.arm(out, at, TimerId::Revoke { fault: f.id.clone() });
                    }
                }
            }
            ResolvedBody::Checkpoint(values) => {
                self.emit(
                    out,
                    ReconcileCommand::Snapshot {
                        checkpoint: name.to_string(),
                    },
                );
                let taken = self
                    .checkpoints
                    .snapshot_checkpoint(name, values, &self.tree, self.store.as_ref(), self.now)
                    .cloned();
                match taken {
                    Ok(cp) => {
                        self.record(RecordBody::Checkpoint { checkpoint: cp });
                        self.drive(out, name, Phase::Running)?;
                        self.drive(out, name, Phase::Success)?;
                    }
                    Err(e) => self.abort(out, Outcome::Aborted, format!("checkpoint {name}: {e}")),
                }
            }
        }
        Ok(())
    }

    /// Everything settled: evaluate scenario assertions, tear down and end.
    fn quiesce(&mut self, out: &mut Vec<ReconcileCommand>) -> Result<(), LifecycleError> {
        if self.outcome.is_some() || !self.faults.is_empty() {
            return Ok(());
        }
        let all_settled = self.runtime.iter().all(|r| r.dispatched && r.settled);
        if !all_settled {
            return Ok(());
        }
        let long_running: Vec<String> = self
            .plan
            .actions
            .iter()
            .enumerate()
            .filter(|(i, a)| a.kind.is_long_running() && !self.runtime[*i].final_checked)
            .map(|(_, a)| a.name.clone())
            .collect();
        for name in &long_running {
            self.final_assertions(out, name)?;
        }
        let scenario = self.plan.doc.name.clone();
        self.final_assertions(out, &scenario)?;
        if self.outcome.is_some() || self.root_failed(out) {
            return Ok(());
        }
        let services: Vec<String> = self
            .tree
            .iter()
            .filter(|(_, n)| n.kind == NodeKind::Service && n.phase == Phase::Running)
            .map(|(_, n)| n.name.clone())
            .collect();
        for s in services {
            self.emit(
                out,
                ReconcileCommand::KillJob {
                    job: s.clone(),
                    teardown: true,
                },
            );
            self.drive(out, &s, Phase::Success)?;
        }
        for rt in &mut self.runtime {
            rt.final_checked = true;
        }
        let root = self.tree.root();
        if !self.tree.get(root).phase.is_terminal() {
            let records = self.tree.advance(root, Phase::Success)?;
            self.record_transitions(records);
        }
        if self.root_failed(out) {
            return Ok(());
        }
        let reason = "all actions completed".to_string();
        self.emit(out, ReconcileCommand::Finish { reason: reason.clone() });
        self.conclude(Outcome::Success, reason);
        Ok(())
    }

    fn conclude(&mut self, outcome: Outcome, reason: String) {
        tracing::info!(?outcome, %reason, "run finished");
        self.timers.clear();
        self.record(RecordBody::Outcome {
            outcome,
            reason: reason.clone(),
        });
        self.outcome = Some((outcome, reason));
    }

    /// Stops the run: revoke faults, kill live jobs, close regions, end.
    fn abort(&mut self, out: &mut Vec<ReconcileCommand>, outcome: Outcome, reason: String) {
        if self.outcome.is_some() {
            return;
        }
        self.held.clear();
        let ids: Vec<String> = self.faults.keys().cloned().collect();
        for id in ids {
            let f = self.faults.remove(&id).unwrap();
            self.emit(out, ReconcileCommand::RevokeFault { fault: id.clone() });
            self.untag_targets(&f);
        }
        let live: Vec<String> = self
            .created
            .iter()
            .filter(|j| self.tree.node(j).is_some_and(|n| !n.phase.is_terminal()))
            .cloned()
            .collect();
        for job in live {
            self.emit(out, ReconcileCommand::KillJob { job, teardown: false });
        }
        let open: Vec<String> = self
            .annotations
            .open_regions()
            .iter()
            .map(|a| a.label.clone())
            .collect();
        for label in open {
            self.annotate(out, AnnotationOp::Close, &label);
        }
        self.emit(
            out,
            ReconcileCommand::AbortRun {
                outcome,
                reason: reason.clone(),
            },
        );
        self.conclude(outcome, reason);
    }
}

/// Applies one event to `state`; see [`EngineState::reconcile`].
pub fn reconcile(state: &mut EngineState, ev: &Event) -> Vec<ReconcileCommand> {
    state.reconcile(ev)
}
