//! Turns a parsed scenario plus a template library into concrete services,
//! jobs, faults, checkpoint reductions and parsed assertions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::macros::instance_name;
use super::{
    expand_macro, instantiate_template, parse_fault_body, ActionBody, ActionKind, FaultBody, FaultSource, Finding,
    Inputs, ScenarioDoc, TemplateLibrary,
};
use crate::executors::{FaultSpec, JobKind, JobSpec, ProcessCommand, SimBehavior};
use crate::expressions::{parse_expression, parse_reduction, Expression, ExpressionSource, MetricsQuery};
use crate::lifecycle::{NodeKind, ResourceTree};

/// Resolved text of a service template.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    /// Metric names the service reports; declared in the store at start.
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub sim: Option<SimBehavior>,
    #[serde(default)]
    pub process: Option<ProcessCommand>,
    #[serde(default)]
    pub callables: BTreeMap<String, CallableSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallableSpec {
    #[serde(default)]
    pub sim: Option<SimBehavior>,
    #[serde(default)]
    pub process: Option<ProcessCommand>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub owner: String,
    pub text: String,
    pub expr: Expression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedBody {
    /// Service jobs created by a Service or Cluster action.
    Services(Vec<JobSpec>),
    /// One job per target service.
    Call(Vec<JobSpec>),
    Chaos(Vec<FaultSpec>),
    Checkpoint(Vec<(String, MetricsQuery)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAction {
    pub name: String,
    pub kind: ActionKind,
    pub body: ResolvedBody,
    pub tolerated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScenario {
    pub doc: ScenarioDoc,
    pub actions: Vec<ResolvedAction>,
    pub services: BTreeMap<String, ServiceSpec>,
    /// Owning action of each service.
    pub service_owner: BTreeMap<String, String>,
    /// Action-level assertions followed by scenario-level ones.
    pub assertions: Vec<Assertion>,
}

impl ResolvedScenario {
    pub fn action(&self, name: &str) -> Option<&ResolvedAction> {
        self.actions.iter().find(|a| a.name == name)
    }

    /// Ownership tree before any job has been dispatched.
    pub fn build_tree(&self) -> ResourceTree {
        let mut tree = ResourceTree::new(&self.doc.name);
        let root = tree.root();
        for a in &self.actions {
            let (kind, leaf_single_service) = match a.kind {
                ActionKind::Service => (NodeKind::Service, true),
                ActionKind::Cluster => (NodeKind::Cluster, false),
                ActionKind::Call => (NodeKind::Call, false),
                ActionKind::Chaos => (NodeKind::Chaos, false),
                ActionKind::Checkpoint => (NodeKind::Checkpoint, false),
            };
            let id = tree.add_child(root, &a.name, kind, a.tolerated);
            match &a.body {
                ResolvedBody::Services(jobs) if !leaf_single_service => {
                    for j in jobs {
                        tree.add_child(id, &j.name, NodeKind::Service, 0);
                    }
                }
                ResolvedBody::Call(jobs) => {
                    for j in jobs {
                        tree.add_child(id, &j.name, NodeKind::Job, 0);
                    }
                }
                _ => {}
            }
        }
        tree
    }
}

/// Name of the job a Call action runs on one service.
pub fn call_job_name(action: &str, service: &str) -> String {
    format!("{action}@{service}")
}

fn yaml_error(e: serde_yaml::Error) -> String {
    e.to_string().lines().next().unwrap_or_default().to_string()
}

/// Resolves `doc`. Returns `None` when any error finding was produced.
pub fn resolve(doc: &ScenarioDoc, templates: &TemplateLibrary) -> (Option<ResolvedScenario>, Vec<Finding>) {
    let mut r = Resolver {
        doc,
        templates,
        findings: Vec::new(),
        services: BTreeMap::new(),
        service_owner: BTreeMap::new(),
    };
    // Services first so that calls and faults can check their targets.
    let mut service_jobs: BTreeMap<&str, Vec<JobSpec>> = BTreeMap::new();
    for a in &doc.actions {
        if let ActionBody::Service { .. } | ActionBody::Cluster { .. } = &a.body {
            service_jobs.insert(&a.name, r.services_of(a));
        }
    }
    let mut actions = Vec::new();
    for a in &doc.actions {
        let (body, tolerated) = match &a.body {
            ActionBody::Service { .. } => (
                ResolvedBody::Services(service_jobs.remove(a.name.as_str()).unwrap_or_default()),
                0,
            ),
            ActionBody::Cluster { tolerated_failures, .. } => (
                ResolvedBody::Services(service_jobs.remove(a.name.as_str()).unwrap_or_default()),
                *tolerated_failures,
            ),
            ActionBody::Call { callable, services } => {
                (ResolvedBody::Call(r.call_jobs(&a.name, callable, services)), 0)
            }
            ActionBody::Chaos(source) => (ResolvedBody::Chaos(r.faults(&a.name, source)), 0),
            ActionBody::Checkpoint { values } => (ResolvedBody::Checkpoint(r.reductions(&a.name, values)), 0),
        };
        actions.push(ResolvedAction {
            name: a.name.clone(),
            kind: a.kind(),
            body,
            tolerated,
        });
    }
    let mut assertions = Vec::new();
    let owners = doc
        .actions
        .iter()
        .map(|a| (a.name.as_str(), &a.assertions))
        .chain(std::iter::once((doc.name.as_str(), &doc.assertions)));
    for (owner, texts) in owners {
        for text in texts {
            match parse_expression(&ExpressionSource::new(text.clone())) {
                Ok(expr) => assertions.push(Assertion {
                    owner: owner.to_string(),
                    text: text.clone(),
                    expr,
                }),
                Err(e) => r.error(owner, format!("invalid assertion {text:?}: {e}")),
            }
        }
    }
    let findings = r.findings;
    let failed = findings.iter().any(Finding::is_error);
    let resolved = (!failed).then(|| ResolvedScenario {
        doc: doc.clone(),
        actions,
        services: r.services,
        service_owner: r.service_owner,
        assertions,
    });
    (resolved, findings)
}

struct Resolver<'a> {
    doc: &'a ScenarioDoc,
    templates: &'a TemplateLibrary,
    findings: Vec<Finding>,
    services: BTreeMap<String, ServiceSpec>,
    service_owner: BTreeMap<String, String>,
}

impl Resolver<'_> {
    fn error(&mut self, at: &str, message: impl Into<String>) {
        self.findings.push(Finding::error(at, message));
    }

    fn instantiate(
        &mut self,
        at: &str,
        template_ref: &str,
        inputs: &Inputs,
        auto: &[(&str, String)],
    ) -> Option<String> {
        let Some(t) = self.templates.get(template_ref) else {
            self.error(at, format!("unknown template: {template_ref}"));
            return None;
        };
        let mut inputs = inputs.clone();
        for (k, v) in auto {
            if t.parameter(k).is_some() && !inputs.contains_key(*k) {
                inputs.insert(k.to_string(), v.clone());
            }
        }
        match instantiate_template(t, &inputs) {
            Ok(text) => Some(text),
            Err(e) => {
                self.error(at, e.to_string());
                None
            }
        }
    }

    fn services_of(&mut self, a: &super::ActionSpec) -> Vec<JobSpec> {
        let (template_ref, inputs, names) = match &a.body {
            ActionBody::Service { template_ref, inputs } => (template_ref, inputs, vec![a.name.clone()]),
            ActionBody::Cluster {
                template_ref,
                inputs,
                instances,
                tolerated_failures,
            } => {
                if tolerated_failures >= instances {
                    self.error(
                        &a.name,
                        format!("toleratedFailures ({tolerated_failures}) must be less than instances ({instances})"),
                    );
                }
                (
                    template_ref,
                    inputs,
                    (0..*instances).map(|i| instance_name(&a.name, i)).collect(),
                )
            }
            _ => unreachable!(),
        };
        if inputs.len() > 1 && inputs.len() != names.len() {
            self.error(
                &a.name,
                format!(
                    "{} input sets for {} instances; give one shared set or one per instance",
                    inputs.len(),
                    names.len()
                ),
            );
            return Vec::new();
        }
        let empty = Inputs::new();
        let mut jobs = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let selected = match inputs.len() {
                0 => &empty,
                1 => &inputs[0],
                _ => &inputs[i],
            };
            let auto = [("instance", i.to_string()), ("name", name.clone())];
            let Some(text) = self.instantiate(&a.name, template_ref, selected, &auto) else {
                return Vec::new();
            };
            let spec: ServiceSpec = match serde_yaml::from_str::<Option<ServiceSpec>>(&text) {
                Ok(spec) => spec.unwrap_or_default(),
                Err(e) => {
                    self.error(
                        &a.name,
                        format!("template {template_ref}: invalid service spec: {}", yaml_error(e)),
                    );
                    return Vec::new();
                }
            };
            let behaviours = spec.sim.iter().map(|b| ("service".to_string(), b)).chain(
                spec.callables
                    .iter()
                    .filter_map(|(k, c)| c.sim.as_ref().map(|b| (format!("callable {k}"), b))),
            );
            let problems: Vec<String> = behaviours
                .filter_map(|(what, b)| b.check().err().map(|e| format!("template {template_ref}: {what}: {e}")))
                .collect();
            for p in problems {
                self.error(&a.name, p);
            }
            jobs.push(JobSpec {
                name: name.clone(),
                kind: JobKind::Service,
                host: name.clone(),
                sim: spec.sim.clone(),
                process: spec.process.clone(),
            });
            self.services.insert(name.clone(), spec);
            self.service_owner.insert(name.clone(), a.name.clone());
        }
        jobs
    }

    fn expand(&mut self, at: &str, names: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in names {
            match expand_macro(n, self.doc) {
                Ok(list) => {
                    for s in list {
                        if out.contains(&s) {
                            self.findings
                                .push(Finding::warning(at, format!("duplicate target {s} ignored")));
                        } else {
                            out.push(s);
                        }
                    }
                }
                Err(e) => self.error(at, e.to_string()),
            }
        }
        out
    }

    fn check_services(&mut self, at: &str, names: &[String]) -> bool {
        let mut ok = true;
        for n in names {
            if !self.services.contains_key(n) {
                self.error(at, format!("unknown service: {n}"));
                ok = false;
            }
        }
        ok
    }

    fn call_jobs(&mut self, at: &str, callable: &str, services: &[String]) -> Vec<JobSpec> {
        let targets = self.expand(at, services);
        if !self.check_services(at, &targets) {
            return Vec::new();
        }
        let mut jobs = Vec::new();
        for svc in targets {
            match self.services[&svc].callables.get(callable) {
                Some(c) => jobs.push(JobSpec {
                    name: call_job_name(at, &svc),
                    kind: JobKind::Call,
                    host: svc.clone(),
                    sim: c.sim.clone(),
                    process: c.process.clone(),
                }),
                None => self.error(at, format!("unknown callable {callable} on service {svc}")),
            }
        }
        jobs
    }

    fn faults(&mut self, at: &str, source: &FaultSource) -> Vec<FaultSpec> {
        let bodies: Vec<FaultBody> = match source {
            FaultSource::Inline(body) => vec![body.clone()],
            FaultSource::Template { template_ref, inputs } => {
                let sets: Vec<Inputs> = if inputs.is_empty() {
                    vec![Inputs::new()]
                } else {
                    inputs.clone()
                };
                let mut bodies = Vec::new();
                for set in &sets {
                    let Some(text) = self.instantiate(at, template_ref, set, &[]) else {
                        return Vec::new();
                    };
                    let parsed = match serde_yaml::from_str::<Value>(&text) {
                        Ok(Value::Mapping(m)) => parse_fault_body(&m, Some(at)).map_err(|e| e.to_string()),
                        Ok(_) => Err("fault template must resolve to a mapping".to_string()),
                        Err(e) => Err(yaml_error(e)),
                    };
                    match parsed {
                        Ok(b) => bodies.push(b),
                        Err(e) => {
                            self.error(at, format!("template {template_ref}: {e}"));
                            return Vec::new();
                        }
                    }
                }
                bodies
            }
        };
        let count = bodies.len();
        let mut faults = Vec::new();
        for (i, b) in bodies.into_iter().enumerate() {
            let targets = self.expand(at, &b.targets);
            let dst = self.expand(at, &b.dst);
            let known = self.check_services(at, &targets) & self.check_services(at, &dst);
            let fault = FaultSpec {
                id: if count == 1 {
                    at.to_string()
                } else {
                    format!("{at}/{i}")
                },
                kind: b.kind,
                targets,
                dst,
                direction: b.direction,
                duration: b.duration,
            };
            if let Err(e) = fault.check() {
                self.error(at, e.to_string());
            } else if known {
                faults.push(fault);
            }
        }
        faults
    }

    fn reductions(&mut self, at: &str, values: &[(String, String)]) -> Vec<(String, MetricsQuery)> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (key, text) in values {
            if !seen.insert(key) {
                self.error(at, format!("duplicate checkpoint key {key}"));
            }
            match parse_reduction(text) {
                Ok(q) => out.push((key.clone(), q)),
                Err(e) => self.error(at, format!("invalid checkpoint value {key}: {e}")),
            }
        }
        out
    }
}
