#![allow(dead_code)]

use std::path::PathBuf;

use whatif::dsl::{parse_scenario, ScenarioDoc, TemplateLibrary};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn templates() -> TemplateLibrary {
    TemplateLibrary::load_dir(&scenarios_dir().join("templates")).expect("fixture templates load")
}

pub fn scenario(name: &str) -> ScenarioDoc {
    let text = std::fs::read_to_string(scenarios_dir().join(format!("{name}.yaml"))).expect("fixture exists");
    parse_scenario(&text).expect("fixture parses")
}

use whatif::dsl::Template;
use whatif::engine::{run_sim, ReconcileCommand, RecordBody, RunResult, RunTrace};

/// Library of parameterless templates given as `(name, body)`.
pub fn inline_templates(entries: &[(&str, &str)]) -> TemplateLibrary {
    let mut lib = TemplateLibrary::new();
    for (name, body) in entries {
        lib.insert(Template::new(*name, Vec::new(), *body).expect("template is well formed"))
            .unwrap();
    }
    lib
}

pub fn run_inline(yaml: &str, templates: &TemplateLibrary, seed: u64) -> RunResult {
    let doc = parse_scenario(yaml).expect("scenario parses");
    run_sim(&doc, templates, seed).expect("scenario is valid")
}

/// `(at, cycle)` of the first command matching `pred`.
pub fn first_command(trace: &RunTrace, pred: impl Fn(&ReconcileCommand) -> bool) -> Option<(u64, u64)> {
    trace
        .commands()
        .find(|(_, c)| pred(c))
        .map(|(r, _)| (r.at.as_millis(), r.cycle))
}

pub fn created_jobs(trace: &RunTrace) -> Vec<String> {
    trace
        .commands()
        .filter_map(|(_, c)| match c {
            ReconcileCommand::CreateJob { job, .. } => Some(job.clone()),
            _ => None,
        })
        .collect()
}

/// Closed regions as `(label, start_ms, end_ms)`, plus labels never closed.
pub fn regions(trace: &RunTrace) -> (Vec<(String, u64, u64)>, Vec<String>) {
    use whatif::engine::AnnotationOp;
    let mut open: Vec<(String, u64)> = Vec::new();
    let mut closed = Vec::new();
    for (_, op, a) in trace.annotations() {
        match op {
            AnnotationOp::Open => open.push((a.label.clone(), a.start.as_millis())),
            AnnotationOp::Close => {
                let i = open
                    .iter()
                    .rposition(|(l, _)| *l == a.label)
                    .expect("close matches an open region");
                let (label, start) = open.remove(i);
                closed.push((label, start, a.end.expect("closed region has an end").as_millis()));
            }
            AnnotationOp::Point => {}
        }
    }
    (closed, open.into_iter().map(|(l, _)| l).collect())
}

/// Phase sequence of every node, in trace order.
pub fn phase_histories(trace: &RunTrace) -> std::collections::BTreeMap<String, Vec<whatif::lifecycle::Phase>> {
    let mut out: std::collections::BTreeMap<String, Vec<_>> = Default::default();
    for r in trace.records() {
        if let RecordBody::Transition { transition } = &r.body {
            let h = out
                .entry(transition.node.clone())
                .or_insert_with(|| vec![transition.from]);
            h.push(transition.to);
        }
    }
    out
}
