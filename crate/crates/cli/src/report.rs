//! Run reports rebuilt from a trace and the persisted metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use whatif::dsl::ActionKind;
use whatif::engine::{AnnotationOp, Outcome, RecordBody, RunTrace};
use whatif::lifecycle::{FailureClass, Phase};
use whatif::telemetry::{Annotation, AnnotationKind, AnnotationLog, Checkpoint, MetricsStore};
use whatif::time::{format_duration, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("trace has no start record")]
    MissingStart,
    #[error("trace has no outcome record; the run did not complete")]
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub at: Timestamp,
    pub from: Phase,
    pub to: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<FailureClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTimeline {
    pub name: String,
    pub kind: ActionKind,
    pub phase: Phase,
    /// First time the action left Uninitialized.
    pub start: Option<Timestamp>,
    /// Time it reached a terminal phase.
    pub end: Option<Timestamp>,
    pub history: Vec<PhaseChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub at: Timestamp,
    pub owner: String,
    pub expression: String,
    pub fired: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    pub points: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub executor: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub reason: String,
    pub makespan: Timestamp,
    pub actions: Vec<ActionTimeline>,
    pub assertions: Vec<AssertionResult>,
    pub annotations: Vec<Annotation>,
    pub checkpoints: Vec<Checkpoint>,
    pub warnings: Vec<String>,
    pub series: Vec<SeriesSummary>,
}

impl RunReport {
    pub fn build(trace: &RunTrace, metrics: &MetricsStore) -> Result<RunReport, ReportError> {
        let mut header = None;
        let mut actions: Vec<ActionTimeline> = Vec::new();
        let mut assertions = Vec::new();
        let mut log = AnnotationLog::default();
        let mut checkpoints = Vec::new();
        let mut warnings = Vec::new();
        for r in trace.records() {
            match &r.body {
                RecordBody::Start {
                    scenario,
                    executor,
                    seed,
                    actions: infos,
                } => {
                    header = Some((scenario.clone(), executor.clone(), *seed));
                    actions = infos
                        .iter()
                        .map(|a| ActionTimeline {
                            name: a.name.clone(),
                            kind: a.kind,
                            phase: Phase::Uninitialized,
                            start: None,
                            end: None,
                            history: Vec::new(),
                        })
                        .collect();
                }
                RecordBody::Transition { transition: t } => {
                    if let Some(a) = actions.iter_mut().find(|a| a.name == t.node) {
                        a.phase = t.to;
                        a.start.get_or_insert(r.at);
                        if t.to.is_terminal() {
                            a.end = Some(r.at);
                        }
                        a.history.push(PhaseChange {
                            at: r.at,
                            from: t.from,
                            to: t.to,
                            class: t.class,
                            reason: t.reason.clone(),
                        });
                    }
                }
                RecordBody::Annotation { op, annotation } => match op {
                    AnnotationOp::Close => {
                        let end = annotation.end.unwrap_or(r.at);
                        if log.close_region(&annotation.label, end).is_err() {
                            warnings.push(format!("close of unknown region {}", annotation.label));
                        }
                    }
                    _ => log.annotate(annotation.clone()),
                },
                RecordBody::Assertion {
                    owner,
                    expression,
                    fired,
                    error,
                } => assertions.push(AssertionResult {
                    at: r.at,
                    owner: owner.clone(),
                    expression: expression.clone(),
                    fired: *fired,
                    error: error.clone(),
                }),
                RecordBody::Checkpoint { checkpoint } => checkpoints.push(checkpoint.clone()),
                RecordBody::Warning { message } => warnings.push(message.clone()),
                _ => {}
            }
        }
        let (scenario, executor, seed) = header.ok_or(ReportError::MissingStart)?;
        let (outcome, reason) = trace.outcome().ok_or(ReportError::Incomplete)?;
        let makespan = trace.records().last().map_or(Timestamp::ZERO, |r| r.at);
        let series = metrics
            .names()
            .into_iter()
            .map(|name| {
                let points = metrics
                    .query(&name, Timestamp::ZERO, Timestamp::MAX)
                    .unwrap_or_default();
                let values = points.iter().map(|p| p.value);
                SeriesSummary {
                    points: points.len(),
                    min: values.clone().reduce(f64::min),
                    max: values.reduce(f64::max),
                    name,
                }
            })
            .collect();
        Ok(RunReport {
            scenario,
            executor,
            seed,
            outcome,
            reason: reason.to_string(),
            makespan,
            actions,
            assertions,
            annotations: log.entries().to_vec(),
            checkpoints,
            warnings,
            series,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }

    /// Human-readable timeline.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let t = |ts: Timestamp| format_duration(std::time::Duration::from_millis(ts.as_millis()));
        let _ = writeln!(
            out,
            "scenario {} ({} executor, seed {}): {:?}",
            self.scenario, self.executor, self.seed, self.outcome
        );
        let _ = writeln!(out, "reason: {}", self.reason);
        let _ = writeln!(out, "makespan: {}", t(self.makespan));
        let _ = writeln!(out, "\nactions:");
        let width = self.actions.iter().map(|a| a.name.len()).max().unwrap_or(0);
        for a in &self.actions {
            let span = match (a.start, a.end) {
                (Some(s), Some(e)) => format!("{} .. {}", t(s), t(e)),
                (Some(s), None) => format!("{} ..", t(s)),
                _ => "never started".to_string(),
            };
            let _ = writeln!(
                out,
                "  {:width$}  {:<10}  {:<9}  {span}",
                a.name,
                a.kind.as_str(),
                a.phase.as_str()
            );
            if let Some(c) = a.history.iter().find(|c| c.to == Phase::Failed) {
                let why = c.reason.as_deref().unwrap_or("no reason recorded");
                let _ = writeln!(out, "  {:width$}  failed at {}: {why}", "", t(c.at));
            }
        }
        let _ = writeln!(out, "\ntimeline:");
        let mut marks: Vec<&Annotation> = self.annotations.iter().collect();
        marks.sort_by_key(|a| a.start);
        for a in marks {
            match a.kind {
                AnnotationKind::Point => {
                    let _ = writeln!(out, "  {:>10}  * {}", t(a.start), a.label);
                }
                AnnotationKind::Region => {
                    let end = a.end.map_or("open".to_string(), t);
                    let _ = writeln!(out, "  {:>10}  [ {} until {end}", t(a.start), a.label);
                }
            }
        }
        if !self.assertions.is_empty() {
            let _ = writeln!(out, "\nassertions:");
            for a in &self.assertions {
                let status = match (&a.error, a.fired) {
                    (Some(_), _) => "error",
                    (None, true) => "FIRED",
                    (None, false) => "quiet",
                };
                let _ = writeln!(out, "  {:>10}  {status:<5}  {}: {}", t(a.at), a.owner, a.expression);
                if let Some(e) = &a.error {
                    let _ = writeln!(out, "              {e}");
                }
            }
        }
        if !self.checkpoints.is_empty() {
            let _ = writeln!(out, "\ncheckpoints:");
            for cp in &self.checkpoints {
                let values: Vec<String> = cp.values.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
                let _ = writeln!(out, "  {} at {}: {}", cp.name, t(cp.at), values.join(", "));
            }
        }
        if !self.series.is_empty() {
            let _ = writeln!(out, "\nmetrics:");
            for s in &self.series {
                let range = match (s.min, s.max) {
                    (Some(lo), Some(hi)) => format!("min {lo:.3}, max {hi:.3}"),
                    _ => "no points".to_string(),
                };
                let _ = writeln!(out, "  {}: {} points, {range}", s.name, s.points);
            }
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(out, "\nwarnings:");
            for w in &self.warnings {
                let _ = writeln!(out, "  {w}");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub label: String,
    pub kind: AnnotationKind,
    /// Milliseconds since run start.
    pub start: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<u64>,
}

/// Series as `[t_ms, value]` pairs plus annotation markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub series: BTreeMap<String, Vec<(u64, f64)>>,
    pub markers: Vec<Marker>,
}

impl PlotData {
    pub fn build(report: &RunReport, metrics: &MetricsStore) -> PlotData {
        let series = metrics
            .names()
            .into_iter()
            .map(|name| {
                let points = metrics
                    .query(&name, Timestamp::ZERO, Timestamp::MAX)
                    .unwrap_or_default();
                (name, points.iter().map(|p| (p.at.as_millis(), p.value)).collect())
            })
            .collect();
        let markers = report
            .annotations
            .iter()
            .map(|a| Marker {
                label: a.label.clone(),
                kind: a.kind,
                start: a.start.as_millis(),
                end: a.end.map(Timestamp::as_millis),
            })
            .collect();
        PlotData { series, markers }
    }
}
