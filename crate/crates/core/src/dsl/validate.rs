use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::macros::instance_name;
use super::resolve::resolve;
use super::{ActionBody, ActionKind, ScenarioDoc, TemplateLibrary};
use crate::expressions::{check_scope, Expression};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

impl Finding {
    pub fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} [{}]: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn new(findings: Vec<Finding>) -> Self {
        ValidationReport {
            ok: !findings.iter().any(Finding::is_error),
            findings,
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.is_error())
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = Finding>) {
        self.findings.extend(more);
        self.ok = !self.findings.iter().any(Finding::is_error);
    }
}

/// Static checks over a parsed scenario.
pub fn validate(doc: &ScenarioDoc, templates: &TemplateLibrary) -> ValidationReport {
    let mut findings = Vec::new();
    check_names(doc, &mut findings);
    check_depends(doc, &mut findings);
    check_timeouts(doc, &mut findings);
    let (resolved, resolve_findings) = resolve(doc, templates);
    findings.extend(resolve_findings);
    if let Some(resolved) = resolved {
        let tree = resolved.build_tree();
        let checkpoints: BTreeMap<&str, BTreeSet<&str>> = doc
            .actions
            .iter()
            .filter_map(|a| match &a.body {
                ActionBody::Checkpoint { values } => {
                    Some((a.name.as_str(), values.iter().map(|(k, _)| k.as_str()).collect()))
                }
                _ => None,
            })
            .collect();
        let declared: BTreeSet<&str> = resolved
            .services
            .values()
            .flat_map(|s| s.metrics.iter().map(String::as_str))
            .collect();
        for a in &resolved.assertions {
            findings.extend(check_scope(&a.expr, &a.owner, &tree));
            if let Expression::Metrics(m) = &a.expr {
                for (cp, key) in m.checkpoint_refs() {
                    if !checkpoints
                        .get(cp.as_str())
                        .is_some_and(|keys| keys.contains(key.as_str()))
                    {
                        findings.push(Finding::error(
                            &a.owner,
                            format!("unknown checkpoint reference: {cp}.{key}"),
                        ));
                    }
                }
                if !declared.contains(m.query.metric.as_str()) {
                    findings.push(Finding::warning(
                        &a.owner,
                        format!("metric {} is not declared by any service", m.query.metric),
                    ));
                }
            }
        }
    }
    ValidationReport::new(findings)
}

fn check_names(doc: &ScenarioDoc, findings: &mut Vec<Finding>) {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    seen.insert(doc.name.clone(), "the scenario".to_string());
    for a in &doc.actions {
        let mut names = vec![a.name.clone()];
        if let ActionBody::Cluster { instances, .. } = &a.body {
            names.extend((0..*instances).map(|i| instance_name(&a.name, i)));
        }
        for n in names {
            let what = if n == a.name {
                format!("action {}", a.name)
            } else {
                format!("instance {n} of {}", a.name)
            };
            if let Some(prev) = seen.get(&n) {
                findings.push(Finding::error(
                    &a.name,
                    format!("duplicate name: {n} ({what} clashes with {prev})"),
                ));
            } else {
                seen.insert(n, what);
            }
        }
    }
}

fn check_depends(doc: &ScenarioDoc, findings: &mut Vec<Finding>) {
    let names: BTreeSet<&str> = doc.actions.iter().map(|a| a.name.as_str()).collect();
    let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for a in &doc.actions {
        let deps = edges.entry(a.name.as_str()).or_default();
        for t in a.depends.targets() {
            if names.contains(t.as_str()) {
                if !deps.contains(&t.as_str()) {
                    deps.push(t);
                }
            } else {
                findings.push(Finding::error(&a.name, format!("unknown action: {t}")));
            }
        }
    }
    if let Some(cycle) = find_cycle(&doc.actions.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(), &edges) {
        let at = cycle[0].to_string();
        findings.push(Finding::error(at, format!("dependency cycle: {}", cycle.join("→"))));
    }
}

/// Kahn's algorithm; when nodes remain, every one of them still has a
/// remaining dependent, so walking dependents backwards must repeat a node.
/// Returns the cycle in dependency order, closed on its start.
fn find_cycle<'a>(order: &[&'a str], edges: &BTreeMap<&'a str, Vec<&'a str>>) -> Option<Vec<&'a str>> {
    let mut indegree: BTreeMap<&str, usize> = order.iter().map(|n| (*n, 0)).collect();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (n, deps) in edges {
        for d in deps {
            *indegree.get_mut(d).unwrap() += 1;
            dependents.entry(*d).or_default().push(*n);
        }
    }
    let mut queue: Vec<&str> = order.iter().copied().filter(|n| indegree[n] == 0).collect();
    let mut removed = BTreeSet::new();
    while let Some(n) = queue.pop() {
        removed.insert(n);
        for d in &edges[n] {
            let e = indegree.get_mut(d).unwrap();
            *e -= 1;
            if *e == 0 {
                queue.push(d);
            }
        }
    }
    let start = order.iter().copied().find(|n| !removed.contains(n))?;
    let mut path = vec![start];
    let mut at = start;
    loop {
        let next = dependents[at]
            .iter()
            .copied()
            .find(|d| !removed.contains(d))
            .expect("remaining nodes keep a remaining dependent");
        if let Some(pos) = path.iter().position(|p| *p == next) {
            let mut cycle = path[pos..].to_vec();
            cycle.push(next);
            cycle.reverse();
            return Some(cycle);
        }
        path.push(next);
        at = next;
    }
}

fn check_timeouts(doc: &ScenarioDoc, findings: &mut Vec<Finding>) {
    if doc.defaults.timeout.is_some() {
        return;
    }
    for a in &doc.actions {
        if a.timeout.is_some() {
            continue;
        }
        let blocking = a.depends.success.iter().find(|t| {
            doc.action(t)
                .is_some_and(|target| matches!(target.kind(), ActionKind::Service | ActionKind::Cluster))
        });
        if let Some(t) = blocking {
            findings.push(Finding::error(
                &a.name,
                format!("depends on success of long-running {t} and may wait forever; set a timeout"),
            ));
        }
    }
}
