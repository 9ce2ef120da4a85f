//! Embedded time-series store, checkpoint registry and annotation log.
//!
//! The store is shared between executor watchers (writers) and the engine
//! (reader) behind a lock; every query sees the state after the last
//! completed ingest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expressions::{CheckpointLookup, EvalError, MetricsQuery, MetricsSource, UnknownMetric};
use crate::lifecycle::{Phase, ResourceTree};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub name: String,
    pub value: f64,
    pub at: Timestamp,
}

impl MetricPoint {
    pub fn new(name: impl Into<String>, value: f64, at: Timestamp) -> Self {
        MetricPoint {
            name: name.into(),
            value,
            at,
        }
    }

    /// `metric <name> <value> <ms>`, newline-terminated.
    pub fn to_line(&self) -> String {
        format!("metric {} {} {}\n", self.name, self.value, self.at.0)
    }

    /// Parses one line of the metrics line protocol.
    pub fn parse_line(line: &str) -> Option<MetricPoint> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut parts = line.split(' ');
        if parts.next()? != "metric" {
            return None;
        }
        let name = parts.next().filter(|n| !n.is_empty())?;
        let value: f64 = parts.next()?.parse().ok()?;
        let at: u64 = parts.next()?.parse().ok()?;
        if parts.next().is_some() || !value.is_finite() || !name.is_ascii() {
            return None;
        }
        Some(MetricPoint::new(name, value, Timestamp(at)))
    }
}

#[derive(Default)]
struct StoreInner {
    series: BTreeMap<String, Vec<(Timestamp, f64)>>,
    declared: BTreeSet<String>,
    rejected: u64,
}

/// In-memory series store with optional append-only persistence.
#[derive(Default)]
pub struct MetricsStore {
    inner: RwLock<StoreInner>,
    sink: Mutex<Option<Box<dyn Write + Send>>>,
}

impl std::fmt::Debug for MetricsStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.read().expect("metrics lock");
        f.debug_struct("MetricsStore")
            .field("series", &inner.series.len())
            .field("rejected", &inner.rejected)
            .finish()
    }
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every accepted point is also written to `sink` in line protocol.
    pub fn with_persistence(sink: Box<dyn Write + Send>) -> Self {
        MetricsStore {
            inner: RwLock::default(),
            sink: Mutex::new(Some(sink)),
        }
    }

    /// Makes a metric queryable before its first point arrives.
    pub fn declare(&self, name: &str) {
        let mut inner = self.inner.write().expect("metrics lock");
        inner.declared.insert(name.to_string());
    }

    /// Returns false (and counts a warning) for points older than the last
    /// one stored under the same name.
    pub fn ingest(&self, p: MetricPoint) -> bool {
        let mut inner = self.inner.write().expect("metrics lock");
        let series = inner.series.entry(p.name.clone()).or_default();
        if series.last().is_some_and(|(t, _)| p.at < *t) {
            inner.rejected += 1;
            tracing::warn!(metric = %p.name, at = p.at.0, "dropping out-of-order point");
            return false;
        }
        series.push((p.at, p.value));
        if let Some(sink) = self.sink.lock().expect("sink lock").as_mut() {
            if let Err(e) = sink.write_all(p.to_line().as_bytes()) {
                tracing::warn!("metrics persistence failed: {e}");
            }
        }
        true
    }

    pub fn rejected(&self) -> u64 {
        self.inner.read().expect("metrics lock").rejected
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.sink.lock().expect("sink lock").as_mut() {
            Some(sink) => sink.flush(),
            None => Ok(()),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let inner = self.inner.read().expect("metrics lock");
        inner
            .series
            .keys()
            .chain(inner.declared.iter())
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Points with `from <= at <= to`, time-ordered.
    pub fn query(&self, name: &str, from: Timestamp, to: Timestamp) -> Result<Vec<MetricPoint>, UnknownMetric> {
        let inner = self.inner.read().expect("metrics lock");
        let Some(series) = inner.series.get(name) else {
            return if inner.declared.contains(name) {
                Ok(Vec::new())
            } else {
                Err(UnknownMetric(name.to_string()))
            };
        };
        if from > to {
            return Ok(Vec::new());
        }
        let lo = series.partition_point(|(t, _)| *t < from);
        let hi = series.partition_point(|(t, _)| *t <= to);
        Ok(series[lo..hi]
            .iter()
            .map(|&(at, value)| MetricPoint::new(name, value, at))
            .collect())
    }

    /// Rebuilds a store from a persisted line-protocol file.
    pub fn load(reader: impl BufRead) -> io::Result<MetricsStore> {
        let store = MetricsStore::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let p = MetricPoint::parse_line(&line)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad metrics line: {line}")))?;
            store.ingest(p);
        }
        Ok(store)
    }
}

impl MetricsSource for MetricsStore {
    fn query(&self, name: &str, from: Timestamp, to: Timestamp) -> Result<Vec<MetricPoint>, UnknownMetric> {
        MetricsStore::query(self, name, from, to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub name: String,
    pub at: Timestamp,
    pub values: BTreeMap<String, f64>,
    pub phases: BTreeMap<String, Phase>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("duplicate checkpoint: {0}")]
    Duplicate(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointRegistry {
    entries: BTreeMap<String, Checkpoint>,
}

impl CheckpointRegistry {
    pub fn get(&self, name: &str) -> Option<&Checkpoint> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Checkpoint> {
        self.entries.values()
    }

    /// Reduces each query at `at` and captures every node's phase.
    ///
    /// Keys whose window is empty are left out of `values`.
    pub fn snapshot_checkpoint(
        &mut self,
        name: &str,
        exprs: &[(String, MetricsQuery)],
        tree: &ResourceTree,
        store: &dyn MetricsSource,
        at: Timestamp,
    ) -> Result<&Checkpoint, CheckpointError> {
        if self.entries.contains_key(name) {
            return Err(CheckpointError::Duplicate(name.to_string()));
        }
        let mut values = BTreeMap::new();
        for (key, q) in exprs {
            if let Some(v) = q.reduce(store, at)? {
                values.insert(key.clone(), v);
            }
        }
        let phases = tree.iter().map(|(_, n)| (n.name.clone(), n.phase)).collect();
        let cp = Checkpoint {
            name: name.to_string(),
            at,
            values,
            phases,
        };
        Ok(self.entries.entry(name.to_string()).or_insert(cp))
    }

    pub fn insert(&mut self, cp: Checkpoint) -> Result<(), CheckpointError> {
        if self.entries.contains_key(&cp.name) {
            return Err(CheckpointError::Duplicate(cp.name));
        }
        self.entries.insert(cp.name.clone(), cp);
        Ok(())
    }
}

impl CheckpointLookup for CheckpointRegistry {
    fn checkpoint_value(&self, name: &str, key: &str) -> Option<f64> {
        self.entries.get(name)?.values.get(key).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationKind {
    Point,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: AnnotationKind,
    pub label: String,
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

impl Annotation {
    pub fn point(label: impl Into<String>, at: Timestamp) -> Self {
        Annotation {
            kind: AnnotationKind::Point,
            label: label.into(),
            start: at,
            end: None,
        }
    }

    pub fn region(label: impl Into<String>, start: Timestamp) -> Self {
        Annotation {
            kind: AnnotationKind::Region,
            label: label.into(),
            start,
            end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown region: {0}")]
pub struct UnknownRegion(pub String);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationLog {
    entries: Vec<Annotation>,
}

impl AnnotationLog {
    pub fn annotate(&mut self, a: Annotation) {
        self.entries.push(a);
    }

    pub fn close_region(&mut self, label: &str, end: Timestamp) -> Result<&Annotation, UnknownRegion> {
        let entry = self
            .entries
            .iter_mut()
            .rev()
            .find(|a| a.kind == AnnotationKind::Region && a.label == label && a.end.is_none())
            .ok_or_else(|| UnknownRegion(label.to_string()))?;
        entry.end = Some(end.max(entry.start));
        Ok(entry)
    }

    pub fn open_regions(&self) -> Vec<&Annotation> {
        self.entries
            .iter()
            .filter(|a| a.kind == AnnotationKind::Region && a.end.is_none())
            .collect()
    }

    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }
}

/// Renders a store as a compact text table; used by the text report.
pub fn summarize(store: &MetricsStore) -> String {
    let mut out = String::new();
    for name in store.names() {
        let series = store.query(&name, Timestamp::ZERO, Timestamp::MAX).unwrap_or_default();
        let max = series.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
        if series.is_empty() {
            let _ = writeln!(out, "  {name}: no data");
        } else {
            let _ = writeln!(out, "  {name}: {} points, max {max}", series.len());
        }
    }
    out
}
