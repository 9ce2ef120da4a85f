mod common;

use common::*;
use proptest::prelude::*;
use whatif::engine::{Outcome, ReconcileCommand, RecordBody, RunResult};
use whatif::lifecycle::{FailureClass, Phase};

const HOST: &str = "callables:\n  c5:\n    sim: { duration: 5s }\n  c20:\n    sim: { duration: 20s, jitter: 10s }\n  c60:\n    sim: { duration: 60s }\n";

fn crashy(at_s: u64) -> String {
    format!("sim:\n  script:\n    - {{ at: {at_s}s, crash: boom }}\n{HOST}")
}

/// Callable, dependencies on earlier calls (index, wants success), delay.
type CallSpec = (&'static str, Vec<(usize, bool)>, Option<u64>);

/// One call action per entry: callable, dependencies on earlier calls
/// (index, wants success), optional delay.
#[derive(Debug, Clone)]
struct Plan {
    calls: Vec<CallSpec>,
    crash_at: Option<u64>,
}

impl Plan {
    fn yaml(&self) -> String {
        let mut y = String::from("name: gen\ndefaults: { timeout: 1h }\nspec:\n- action: Service\n  name: h\n  service: { templateRef: host }\n");
        for (i, (callable, deps, after)) in self.calls.iter().enumerate() {
            let running: Vec<String> = deps.iter().filter(|d| !d.1).map(|d| format!("a{}", d.0)).collect();
            let success: Vec<String> = deps.iter().filter(|d| d.1).map(|d| format!("a{}", d.0)).collect();
            let after = after.map(|s| format!(", after: {s}s")).unwrap_or_default();
            y.push_str(&format!(
                "- action: Call\n  name: a{i}\n  depends: {{ running: [{}], success: [{}]{after} }}\n  call: {{ callable: {callable}, services: [h] }}\n",
                running.join(", "),
                success.join(", ")
            ));
        }
        y
    }

    fn run(&self, seed: u64) -> RunResult {
        let body = match self.crash_at {
            Some(at) => crashy(at),
            None => HOST.to_string(),
        };
        run_inline(&self.yaml(), &inline_templates(&[("host", &body)]), seed)
    }
}

fn plan() -> impl Strategy<Value = Plan> {
    (1usize..=6)
        .prop_flat_map(|n| {
            let calls = (0..n)
                .map(|i| {
                    (
                        prop::sample::select(vec!["c5", "c20", "c60"]),
                        prop::collection::vec((0..i.max(1), any::<bool>()), if i == 0 { 0..1 } else { 0..3 }),
                        prop::option::weighted(0.3, 1u64..40),
                    )
                })
                .collect::<Vec<_>>();
            (calls, prop::option::weighted(0.3, 1u64..200))
        })
        .prop_map(|(calls, crash_at)| {
            let calls = calls
                .into_iter()
                .map(|(c, mut deps, after)| {
                    deps.sort();
                    deps.dedup_by_key(|d| d.0);
                    (c, deps, after)
                })
                .collect();
            Plan { calls, crash_at }
        })
}

/// Sequence number of the first transition of `node` into `to`.
fn entered(r: &RunResult, node: &str, to: Phase) -> Option<(u64, u64)> {
    r.trace
        .transitions()
        .find(|(_, t)| t.node == node && t.to == to)
        .map(|(rec, _)| (rec.seq, rec.at.as_millis()))
}

fn first_create(r: &RunResult, action: &str) -> Option<(u64, u64)> {
    r.trace
        .commands()
        .find(|(_, c)| matches!(c, ReconcileCommand::CreateJob { action: a, .. } if a == action))
        .map(|(rec, _)| (rec.seq, rec.at.as_millis()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn same_seed_same_trace(p in plan(), seed in 0u64..1000) {
        prop_assert_eq!(p.run(seed).trace.to_ndjson(), p.run(seed).trace.to_ndjson());
    }

    #[test]
    fn jobs_are_created_only_after_dependencies_hold(p in plan(), seed in 0u64..1000) {
        let r = p.run(seed);
        for (i, (_, deps, after)) in p.calls.iter().enumerate() {
            let Some((seq, at)) = first_create(&r, &format!("a{i}")) else { continue };
            let mut latest = 0;
            for &(d, success) in deps {
                let want = if success { Phase::Success } else { Phase::Running };
                let held = entered(&r, &format!("a{d}"), want);
                prop_assert!(held.is_some_and(|(s, _)| s < seq), "a{i} created before a{d} reached {want:?}");
                latest = latest.max(held.unwrap().1);
            }
            if let Some(delay) = after {
                prop_assert!(at >= latest + delay * 1000, "a{i} created at {at}, deps held at {latest}, delay {delay}s");
            }
        }
    }

    #[test]
    fn success_chains_never_overlap(p in plan(), seed in 0u64..1000) {
        let r = p.run(seed);
        for (i, (_, deps, _)) in p.calls.iter().enumerate() {
            let Some((_, started)) = entered(&r, &format!("a{i}"), Phase::Running) else { continue };
            for &(d, success) in deps {
                if success {
                    let (_, ended) = entered(&r, &format!("a{d}"), Phase::Success).unwrap();
                    prop_assert!(started >= ended);
                }
            }
        }
    }

    #[test]
    fn every_run_concludes_with_settled_actions(p in plan(), seed in 0u64..1000) {
        let r = p.run(seed);
        prop_assert!(r.trace.outcome().is_some());
        prop_assert!(matches!(r.trace.records().last().map(|x| &x.body), Some(RecordBody::Outcome { .. })), "last record is not the outcome");
        if r.outcome == Outcome::Success {
            for i in 0..p.calls.len() {
                prop_assert_eq!(r.tree.node(&format!("a{i}")).unwrap().phase, Phase::Success);
            }
        }
        let (_, open) = regions(&r.trace);
        prop_assert!(open.is_empty(), "open regions: {open:?}");
    }

    #[test]
    fn unexpected_failures_stop_the_run(p in plan(), seed in 0u64..1000) {
        let r = p.run(seed);
        let failure = r.trace.transitions().find(|(_, t)| {
            t.to == Phase::Failed && t.class == Some(FailureClass::Unexpected)
        });
        if let Some((rec, t)) = failure {
            prop_assert_ne!(r.outcome, Outcome::Success, "{} failed unexpectedly", t.node);
            let cycle = rec.cycle;
            prop_assert!(r.trace.commands().all(|(c, cmd)| c.cycle <= cycle || !matches!(cmd, ReconcileCommand::CreateJob { .. })), "job created after the failure");
        } else {
            prop_assert_eq!(r.outcome, Outcome::Success, "{}", r.reason);
        }
    }

    #[test]
    fn phase_histories_only_take_legal_steps(p in plan(), seed in 0u64..1000) {
        let r = p.run(seed);
        for (node, h) in phase_histories(&r.trace) {
            prop_assert!(h.windows(2).all(|w| w[0].can_transition_to(w[1])), "{node}: {h:?}");
        }
    }
}
