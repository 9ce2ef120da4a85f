//! Append-only run record, serialised as one JSON object per line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Event, Outcome, ReconcileCommand};
use crate::dsl::ActionKind;
use crate::lifecycle::TransitionRecord;
use crate::telemetry::{Annotation, Checkpoint};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInfo {
    pub name: String,
    pub kind: ActionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationOp {
    Open,
    Close,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RecordBody {
    Start {
        scenario: String,
        executor: String,
        seed: u64,
        actions: Vec<ActionInfo>,
    },
    Event {
        event: Event,
    },
    Command {
        command: ReconcileCommand,
    },
    Transition {
        transition: TransitionRecord,
    },
    Tag {
        target: String,
        payload: BTreeMap<String, String>,
        applied: bool,
    },
    Annotation {
        op: AnnotationOp,
        annotation: Annotation,
    },
    Checkpoint {
        checkpoint: Checkpoint,
    },
    Assertion {
        owner: String,
        expression: String,
        fired: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Warning {
        message: String,
    },
    Outcome {
        outcome: Outcome,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub cycle: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: RecordBody,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record. Timestamps never go backwards.
    pub fn push(&mut self, cycle: u64, at: Timestamp, body: RecordBody) {
        let at = self.records.last().map_or(at, |r| r.at.max(at));
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { seq, cycle, at, body });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn commands(&self) -> impl Iterator<Item = (&TraceRecord, &ReconcileCommand)> {
        self.records.iter().filter_map(|r| match &r.body {
            RecordBody::Command { command } => Some((r, command)),
            _ => None,
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = (&TraceRecord, &TransitionRecord)> {
        self.records.iter().filter_map(|r| match &r.body {
            RecordBody::Transition { transition } => Some((r, transition)),
            _ => None,
        })
    }

    pub fn annotations(&self) -> impl Iterator<Item = (&TraceRecord, AnnotationOp, &Annotation)> {
        self.records.iter().filter_map(|r| match &r.body {
            RecordBody::Annotation { op, annotation } => Some((r, *op, annotation)),
            _ => None,
        })
    }

    pub fn outcome(&self) -> Option<(Outcome, &str)> {
        self.records.iter().rev().find_map(|r| match &r.body {
            RecordBody::Outcome { outcome, reason } => Some((*outcome, reason.as_str())),
            _ => None,
        })
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<RunTrace, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(RunTrace { records })
    }
}
