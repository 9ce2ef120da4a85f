//! Scenario documents: parsing, templates, addressing macros and validation.
//!
//! A scenario is a YAML document whose `spec:` key lists actions in
//! execution-relevant order:
//!
//! ```yaml
//! name: cockroach-partition
//! spec:
//! - action: Cluster
//!   name: masters
//!   cluster:
//!     templateRef: cockroach.cluster.master
//!     instances: 4
//! - action: Call
//!   name: boot
//!   depends: { running: [ masters ] }
//!   call:
//!     callable: boot
//!     services: [ .cluster.masters.all ]
//! ```

mod macros;
pub mod resolve;
mod template;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::lifecycle::FaultKind;
use crate::time::{format_duration, parse_duration};

pub use macros::{expand_macro, MacroError};
pub use template::{instantiate_template, Parameter, Template, TemplateError, TemplateLibrary};
pub use validate::{validate, Finding, Severity, ValidationReport};

/// Effective timeout when neither the action nor the scenario sets one.
pub const ENGINE_DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Service,
    Cluster,
    Chaos,
    Call,
    Checkpoint,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Service,
        ActionKind::Cluster,
        ActionKind::Chaos,
        ActionKind::Call,
        ActionKind::Checkpoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Service => "Service",
            ActionKind::Cluster => "Cluster",
            ActionKind::Chaos => "Chaos",
            ActionKind::Call => "Call",
            ActionKind::Checkpoint => "Checkpoint",
        }
    }

    fn body_key(self) -> &'static str {
        match self {
            ActionKind::Service => "service",
            ActionKind::Cluster => "cluster",
            ActionKind::Chaos => "chaos",
            ActionKind::Call => "call",
            ActionKind::Checkpoint => "checkpoint",
        }
    }

    pub fn parse(text: &str) -> Option<ActionKind> {
        ActionKind::ALL.into_iter().find(|k| k.as_str() == text)
    }

    /// Services and clusters run until torn down.
    pub fn is_long_running(self) -> bool {
        matches!(self, ActionKind::Service | ActionKind::Cluster)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependsClause {
    pub running: Vec<String>,
    pub success: Vec<String>,
    pub after: Option<Duration>,
}

impl DependsClause {
    pub fn is_empty(&self) -> bool {
        self.running.is_empty() && self.success.is_empty() && self.after.is_none()
    }

    pub fn targets(&self) -> impl Iterator<Item = &String> {
        self.running.iter().chain(self.success.iter())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimeoutPolicy {
    pub timeout: Option<Duration>,
}

pub type Inputs = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    To,
    From,
    Both,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::To => "to",
            Direction::From => "from",
            Direction::Both => "both",
        }
    }

    pub fn parse(text: &str) -> Option<Direction> {
        [Direction::To, Direction::From, Direction::Both]
            .into_iter()
            .find(|d| d.as_str() == text)
    }
}

/// Fault description, written inline or produced by a fault template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultBody {
    pub kind: FaultKind,
    pub targets: Vec<String>,
    pub dst: Vec<String>,
    pub direction: Option<Direction>,
    pub duration: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultSource {
    Template { template_ref: String, inputs: Vec<Inputs> },
    Inline(FaultBody),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionBody {
    Service {
        template_ref: String,
        inputs: Vec<Inputs>,
    },
    Cluster {
        template_ref: String,
        inputs: Vec<Inputs>,
        instances: usize,
        tolerated_failures: usize,
    },
    Chaos(FaultSource),
    Call {
        callable: String,
        services: Vec<String>,
    },
    /// `(key, reduction)` pairs in document order.
    Checkpoint {
        values: Vec<(String, String)>,
    },
}

impl ActionBody {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionBody::Service { .. } => ActionKind::Service,
            ActionBody::Cluster { .. } => ActionKind::Cluster,
            ActionBody::Chaos(_) => ActionKind::Chaos,
            ActionBody::Call { .. } => ActionKind::Call,
            ActionBody::Checkpoint { .. } => ActionKind::Checkpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpec {
    pub name: String,
    pub depends: DependsClause,
    pub body: ActionBody,
    pub assertions: Vec<String>,
    pub timeout: Option<Duration>,
}

impl ActionSpec {
    pub fn kind(&self) -> ActionKind {
        self.body.kind()
    }

    pub fn template_ref(&self) -> Option<&str> {
        match &self.body {
            ActionBody::Service { template_ref, .. } | ActionBody::Cluster { template_ref, .. } => Some(template_ref),
            ActionBody::Chaos(FaultSource::Template { template_ref, .. }) => Some(template_ref),
            _ => None,
        }
    }

    pub fn inputs(&self) -> &[Inputs] {
        match &self.body {
            ActionBody::Service { inputs, .. }
            | ActionBody::Cluster { inputs, .. }
            | ActionBody::Chaos(FaultSource::Template { inputs, .. }) => inputs,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioDoc {
    pub name: String,
    pub actions: Vec<ActionSpec>,
    pub defaults: TimeoutPolicy,
    /// Top-level assertions, evaluated once all actions have settled.
    pub assertions: Vec<String>,
}

impl ScenarioDoc {
    pub fn action(&self, name: &str) -> Option<&ActionSpec> {
        self.actions.iter().find(|a| a.name == name)
    }

    pub fn effective_timeout(&self, action: &ActionSpec) -> Duration {
        action
            .timeout
            .or(self.defaults.timeout)
            .unwrap_or(ENGINE_DEFAULT_TIMEOUT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error{}: {message}", .action.as_ref().map(|a| format!(" in action {a}")).unwrap_or_default())]
    Schema { action: Option<String>, message: String },
}

impl DslError {
    fn schema(action: Option<&str>, message: impl Into<String>) -> Self {
        DslError::Schema {
            action: action.map(str::to_string),
            message: message.into(),
        }
    }
}

const TOP_LEVEL_KEYS: [&str; 4] = ["name", "spec", "defaults", "assertions"];

/// Parses a scenario, discarding warnings.
pub fn parse_scenario(text: &str) -> Result<ScenarioDoc, DslError> {
    parse_scenario_with_warnings(text).map(|(doc, _)| doc)
}

/// Parses a scenario; unknown top-level keys come back as warnings.
pub fn parse_scenario_with_warnings(text: &str) -> Result<(ScenarioDoc, Vec<Finding>), DslError> {
    let root: Value = serde_yaml::from_str(text).map_err(|e| DslError::Syntax(e.to_string()))?;
    let root = match root {
        Value::Mapping(m) => m,
        Value::Null => Mapping::new(),
        _ => return Err(DslError::schema(None, "scenario must be a mapping")),
    };
    let mut warnings = Vec::new();
    for key in root.keys() {
        let key = key_str(key, None)?;
        if !TOP_LEVEL_KEYS.contains(&key) {
            warnings.push(Finding::warning("scenario", format!("unknown top-level key: {key}")));
        }
    }
    let name = match root.get("name") {
        Some(v) => scalar(v, None, "name")?,
        None => "scenario".to_string(),
    };
    let defaults = match root.get("defaults") {
        None | Some(Value::Null) => TimeoutPolicy::default(),
        Some(Value::Mapping(m)) => {
            check_keys(m, &["timeout"], None, "defaults")?;
            TimeoutPolicy {
                timeout: opt_duration(m.get("timeout"), None, "defaults.timeout")?,
            }
        }
        Some(_) => return Err(DslError::schema(None, "defaults must be a mapping")),
    };
    let assertions = string_list(root.get("assertions"), None, "assertions")?;
    let actions = match root.get("spec") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Sequence(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| parse_action(i, v))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(DslError::schema(None, "spec must be a list of actions")),
    };
    Ok((
        ScenarioDoc {
            name,
            actions,
            defaults,
            assertions,
        },
        warnings,
    ))
}

fn parse_action(index: usize, value: &Value) -> Result<ActionSpec, DslError> {
    let Value::Mapping(m) = value else {
        return Err(DslError::schema(None, format!("action #{index} must be a mapping")));
    };
    let name = match m.get("name") {
        Some(v) => scalar(v, None, "name")?,
        None => return Err(DslError::schema(None, format!("action #{index} has no name"))),
    };
    let at = Some(name.as_str());
    if !is_action_name(&name) {
        return Err(DslError::schema(at, format!("invalid action name {name:?}")));
    }
    let kind_text = match (m.get("action"), m.get("kind")) {
        (Some(v), None) | (None, Some(v)) => scalar(v, at, "action")?,
        (Some(_), Some(_)) => return Err(DslError::schema(at, "both `action` and `kind` given")),
        (None, None) => return Err(DslError::schema(at, "missing action kind")),
    };
    let kind = ActionKind::parse(&kind_text)
        .ok_or_else(|| DslError::schema(at, format!("unknown action kind {kind_text:?}")))?;
    let mut allowed = vec!["name", "action", "kind", "depends", "assertions", "timeout", "inputs"];
    allowed.push(kind.body_key());
    check_keys(m, &allowed, at, "action")?;

    let depends = match m.get("depends") {
        None | Some(Value::Null) => DependsClause::default(),
        Some(Value::Mapping(d)) => {
            check_keys(d, &["running", "success", "after"], at, "depends")?;
            DependsClause {
                running: string_list(d.get("running"), at, "depends.running")?,
                success: string_list(d.get("success"), at, "depends.success")?,
                after: opt_duration(d.get("after"), at, "depends.after")?,
            }
        }
        Some(_) => return Err(DslError::schema(at, "depends must be a mapping")),
    };
    let empty = Mapping::new();
    let body_map = match m.get(kind.body_key()) {
        Some(Value::Mapping(b)) => b,
        None | Some(Value::Null) => &empty,
        Some(_) => return Err(DslError::schema(at, format!("{} must be a mapping", kind.body_key()))),
    };
    let mut inputs = inputs_list(m.get("inputs"), at)?;
    let body_inputs = inputs_list(body_map.get("inputs"), at)?;
    if !inputs.is_empty() && !body_inputs.is_empty() {
        return Err(DslError::schema(at, "inputs given twice"));
    }
    inputs.extend(body_inputs);

    let body = parse_body(kind, body_map, inputs, at)?;
    Ok(ActionSpec {
        depends,
        body,
        assertions: string_list(m.get("assertions"), at, "assertions")?,
        timeout: opt_duration(m.get("timeout"), at, "timeout")?,
        name,
    })
}

fn parse_body(kind: ActionKind, b: &Mapping, inputs: Vec<Inputs>, at: Option<&str>) -> Result<ActionBody, DslError> {
    let required = |key: &str| -> Result<String, DslError> {
        match b.get(key) {
            Some(v) => scalar(v, at, key),
            None => Err(DslError::schema(at, format!("missing {}.{key}", kind.body_key()))),
        }
    };
    Ok(match kind {
        ActionKind::Service => {
            check_keys(b, &["templateRef", "inputs"], at, "service")?;
            ActionBody::Service {
                template_ref: required("templateRef")?,
                inputs,
            }
        }
        ActionKind::Cluster => {
            check_keys(
                b,
                &["templateRef", "inputs", "instances", "toleratedFailures"],
                at,
                "cluster",
            )?;
            let instances = count(b.get("instances"), at, "instances")?
                .ok_or_else(|| DslError::schema(at, "missing cluster.instances"))?;
            if instances == 0 {
                return Err(DslError::schema(at, "cluster.instances must be at least 1"));
            }
            ActionBody::Cluster {
                template_ref: required("templateRef")?,
                inputs,
                instances,
                tolerated_failures: count(b.get("toleratedFailures"), at, "toleratedFailures")?.unwrap_or(0),
            }
        }
        ActionKind::Call => {
            check_keys(b, &["callable", "services"], at, "call")?;
            let services = string_list(b.get("services"), at, "call.services")?;
            if services.is_empty() {
                return Err(DslError::schema(at, "call.services must not be empty"));
            }
            ActionBody::Call {
                callable: required("callable")?,
                services,
            }
        }
        ActionKind::Chaos => {
            if let Some(t) = b.get("templateRef") {
                check_keys(b, &["templateRef", "inputs"], at, "chaos")?;
                ActionBody::Chaos(FaultSource::Template {
                    template_ref: scalar(t, at, "templateRef")?,
                    inputs,
                })
            } else {
                if !inputs.is_empty() {
                    return Err(DslError::schema(at, "inputs require a templateRef"));
                }
                ActionBody::Chaos(FaultSource::Inline(parse_fault_body(b, at)?))
            }
        }
        ActionKind::Checkpoint => {
            check_keys(b, &["values"], at, "checkpoint")?;
            let values = match b.get("values") {
                None | Some(Value::Null) => Vec::new(),
                Some(Value::Mapping(v)) => v
                    .iter()
                    .map(|(k, v)| Ok((key_str(k, at)?.to_string(), scalar(v, at, "checkpoint value")?)))
                    .collect::<Result<_, DslError>>()?,
                Some(_) => return Err(DslError::schema(at, "checkpoint.values must be a mapping")),
            };
            ActionBody::Checkpoint { values }
        }
    })
}

/// Parses the fault fields shared by inline chaos bodies and fault templates.
pub fn parse_fault_body(b: &Mapping, at: Option<&str>) -> Result<FaultBody, DslError> {
    check_keys(b, &["kind", "targets", "dst", "direction", "duration"], at, "fault")?;
    let kind_text = match b.get("kind") {
        Some(v) => scalar(v, at, "kind")?,
        None => return Err(DslError::schema(at, "missing fault kind")),
    };
    let kind = FaultKind::parse(&kind_text)
        .ok_or_else(|| DslError::schema(at, format!("unknown fault kind {kind_text:?}")))?;
    let direction = match b.get("direction") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let d = scalar(v, at, "direction")?;
            Some(Direction::parse(&d).ok_or_else(|| DslError::schema(at, format!("unknown direction {d:?}")))?)
        }
    };
    Ok(FaultBody {
        kind,
        targets: name_list(b.get("targets"), at, "targets")?,
        dst: name_list(b.get("dst"), at, "dst")?,
        direction,
        duration: opt_duration(b.get("duration"), at, "duration")?,
    })
}

/// Action names: `[A-Za-z0-9][A-Za-z0-9_-]*`.
pub fn is_action_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphanumeric())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

// ---------------------------------------------------------------------------
// YAML helpers

fn key_str<'a>(k: &'a Value, at: Option<&str>) -> Result<&'a str, DslError> {
    k.as_str()
        .ok_or_else(|| DslError::schema(at, "mapping keys must be strings"))
}

fn check_keys(m: &Mapping, allowed: &[&str], at: Option<&str>, ctx: &str) -> Result<(), DslError> {
    for k in m.keys() {
        let k = key_str(k, at)?;
        if !allowed.contains(&k) {
            return Err(DslError::schema(at, format!("unknown key {k:?} in {ctx}")));
        }
    }
    Ok(())
}

fn scalar(v: &Value, at: Option<&str>, what: &str) -> Result<String, DslError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(DslError::schema(at, format!("{what} must be a scalar"))),
    }
}

fn count(v: Option<&Value>, at: Option<&str>, what: &str) -> Result<Option<usize>, DslError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| DslError::schema(at, format!("{what} must be a non-negative integer"))),
        Some(_) => Err(DslError::schema(at, format!("{what} must be a non-negative integer"))),
    }
}

fn opt_duration(v: Option<&Value>, at: Option<&str>, what: &str) -> Result<Option<Duration>, DslError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let text = scalar(v, at, what)?;
            parse_duration(&text)
                .map(Some)
                .map_err(|e| DslError::schema(at, format!("{what}: invalid duration {text:?}: {e}")))
        }
    }
}

fn string_list(v: Option<&Value>, at: Option<&str>, what: &str) -> Result<Vec<String>, DslError> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Sequence(items)) => items.iter().map(|i| scalar(i, at, what)).collect(),
        Some(_) => Err(DslError::schema(at, format!("{what} must be a list"))),
    }
}

/// A list of names, or one comma-separated string such as
/// `"masters-1, masters-2"`.
pub(crate) fn name_list(v: Option<&Value>, at: Option<&str>, what: &str) -> Result<Vec<String>, DslError> {
    match v {
        Some(Value::String(s)) => Ok(split_names(s)),
        other => Ok(string_list(other, at, what)?
            .iter()
            .flat_map(|s| split_names(s))
            .collect()),
    }
}

fn split_names(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn inputs_list(v: Option<&Value>, at: Option<&str>) -> Result<Vec<Inputs>, DslError> {
    let items = match v {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Sequence(items)) => items.iter().collect::<Vec<_>>(),
        Some(m @ Value::Mapping(_)) => vec![m],
        Some(_) => return Err(DslError::schema(at, "inputs must be a list of mappings")),
    };
    items
        .into_iter()
        .map(|item| match item {
            Value::Mapping(m) => m
                .iter()
                .map(|(k, v)| Ok((key_str(k, at)?.to_string(), scalar(v, at, "input value")?)))
                .collect(),
            _ => Err(DslError::schema(at, "inputs must be a list of mappings")),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rendering

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

fn seq(items: &[String]) -> Value {
    Value::Sequence(items.iter().map(|i| s(i)).collect())
}

fn inputs_value(inputs: &[Inputs]) -> Value {
    Value::Sequence(
        inputs
            .iter()
            .map(|m| Value::Mapping(m.iter().map(|(k, v)| (s(k), s(v))).collect()))
            .collect(),
    )
}

pub(crate) fn fault_body_value(f: &FaultBody) -> Mapping {
    let mut b = Mapping::new();
    b.insert(s("kind"), s(f.kind.as_str()));
    b.insert(s("targets"), seq(&f.targets));
    if !f.dst.is_empty() {
        b.insert(s("dst"), seq(&f.dst));
    }
    if let Some(d) = f.direction {
        b.insert(s("direction"), s(d.as_str()));
    }
    if let Some(d) = f.duration {
        b.insert(s("duration"), s(&format_duration(d)));
    }
    b
}

/// Renders a document back to YAML; `parse_scenario` of the result yields
/// an equal document.
pub fn render_scenario(doc: &ScenarioDoc) -> String {
    let mut root = Mapping::new();
    root.insert(s("name"), s(&doc.name));
    if let Some(t) = doc.defaults.timeout {
        let mut d = Mapping::new();
        d.insert(s("timeout"), s(&format_duration(t)));
        root.insert(s("defaults"), Value::Mapping(d));
    }
    if !doc.assertions.is_empty() {
        root.insert(s("assertions"), seq(&doc.assertions));
    }
    let actions = doc.actions.iter().map(render_action).collect();
    root.insert(s("spec"), Value::Sequence(actions));
    serde_yaml::to_string(&Value::Mapping(root)).expect("yaml rendering")
}

fn render_action(a: &ActionSpec) -> Value {
    let mut m = Mapping::new();
    m.insert(s("action"), s(a.kind().as_str()));
    m.insert(s("name"), s(&a.name));
    if !a.depends.is_empty() {
        let mut d = Mapping::new();
        if !a.depends.running.is_empty() {
            d.insert(s("running"), seq(&a.depends.running));
        }
        if !a.depends.success.is_empty() {
            d.insert(s("success"), seq(&a.depends.success));
        }
        if let Some(after) = a.depends.after {
            d.insert(s("after"), s(&format_duration(after)));
        }
        m.insert(s("depends"), Value::Mapping(d));
    }
    if let Some(t) = a.timeout {
        m.insert(s("timeout"), s(&format_duration(t)));
    }
    if !a.assertions.is_empty() {
        m.insert(s("assertions"), seq(&a.assertions));
    }
    let mut b = Mapping::new();
    match &a.body {
        ActionBody::Service { template_ref, inputs } => {
            b.insert(s("templateRef"), s(template_ref));
            if !inputs.is_empty() {
                b.insert(s("inputs"), inputs_value(inputs));
            }
        }
        ActionBody::Cluster {
            template_ref,
            inputs,
            instances,
            tolerated_failures,
        } => {
            b.insert(s("templateRef"), s(template_ref));
            b.insert(s("instances"), Value::Number((*instances as u64).into()));
            if *tolerated_failures > 0 {
                b.insert(
                    s("toleratedFailures"),
                    Value::Number((*tolerated_failures as u64).into()),
                );
            }
            if !inputs.is_empty() {
                b.insert(s("inputs"), inputs_value(inputs));
            }
        }
        ActionBody::Call { callable, services } => {
            b.insert(s("callable"), s(callable));
            b.insert(s("services"), seq(services));
        }
        ActionBody::Chaos(FaultSource::Template { template_ref, inputs }) => {
            b.insert(s("templateRef"), s(template_ref));
            if !inputs.is_empty() {
                b.insert(s("inputs"), inputs_value(inputs));
            }
        }
        ActionBody::Chaos(FaultSource::Inline(f)) => b = fault_body_value(f),
        ActionBody::Checkpoint { values } => {
            let v: Mapping = values.iter().map(|(k, e)| (s(k), s(e))).collect();
            b.insert(s("values"), Value::Mapping(v));
        }
    }
    m.insert(s(a.kind().body_key()), Value::Mapping(b));
    Value::Mapping(m)
}
