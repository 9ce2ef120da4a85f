use std::collections::BTreeMap;

use proptest::prelude::*;

use whatif::expressions::{
    check_scope, eval_metrics, eval_state, parse_expression, Expression, ExpressionSource, JobState, MetricsExpr,
    Reducer, ScopeSnapshot,
};
use whatif::lifecycle::{NodeKind, Phase, ResourceTree};
use whatif::telemetry::{MetricPoint, MetricsStore};
use whatif::time::Timestamp;

fn parse(text: &str) -> Expression {
    parse_expression(&ExpressionSource::new(text)).unwrap_or_else(|e| panic!("{text}: {e}"))
}

fn phase() -> impl Strategy<Value = Phase> {
    prop::sample::select(Phase::ALL.to_vec())
}

fn jobs(phases: &[Phase]) -> ScopeSnapshot {
    ScopeSnapshot {
        owner: "o".into(),
        jobs: phases
            .iter()
            .enumerate()
            .map(|(i, p)| JobState {
                name: format!("j{i}"),
                phase: *p,
                class: None,
            })
            .collect(),
        nested: BTreeMap::new(),
    }
}

/// A state expression as text, plus the answer it should give.
#[derive(Debug, Clone)]
enum Ast {
    Count(&'static str, &'static str, i64),
    And(Box<Ast>, Box<Ast>),
    Or(Box<Ast>, Box<Ast>),
    Not(Box<Ast>),
}

impl Ast {
    fn text(&self) -> String {
        match self {
            Ast::Count(f, op, k) => format!(".state.{f}() {op} {k}"),
            Ast::And(a, b) => format!("({}) AND ({})", a.text(), b.text()),
            Ast::Or(a, b) => format!("({}) OR ({})", a.text(), b.text()),
            Ast::Not(a) => format!("NOT ({})", a.text()),
        }
    }

    fn truth(&self, phases: &[Phase]) -> bool {
        match self {
            Ast::Count(f, op, k) => {
                let n = phases
                    .iter()
                    .filter(|p| match *f {
                        "failed" => **p == Phase::Failed,
                        "running" => **p == Phase::Running,
                        "success" => **p == Phase::Success,
                        "pending" => **p == Phase::Pending,
                        _ => true,
                    })
                    .count() as i64;
                match *op {
                    "<" => n < *k,
                    "<=" => n <= *k,
                    ">" => n > *k,
                    ">=" => n >= *k,
                    "==" => n == *k,
                    _ => n != *k,
                }
            }
            Ast::And(a, b) => a.truth(phases) && b.truth(phases),
            Ast::Or(a, b) => a.truth(phases) || b.truth(phases),
            Ast::Not(a) => !a.truth(phases),
        }
    }
}

fn ast() -> impl Strategy<Value = Ast> {
    let leaf = (
        prop::sample::select(vec!["failed", "running", "success", "pending", "all"]),
        prop::sample::select(vec!["<", "<=", ">", ">=", "==", "!="]),
        0i64..5,
    )
        .prop_map(|(f, op, k)| Ast::Count(f, op, k));
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Ast::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Ast::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|a| Ast::Not(Box::new(a))),
        ]
    })
}

const ALPHABET: &[&str] = &[
    ".state",
    ".action",
    ".x",
    "failed()",
    "phase()",
    "(",
    ")",
    " ",
    "AND",
    "OR",
    "NOT",
    ">",
    ">=",
    "==",
    "!=",
    "<",
    "1",
    "-2",
    "3.5",
    "\"Running\"",
    "\"",
    "MAX()",
    "COUNT()",
    "QUERY(",
    "m",
    ",",
    "5m",
    "now",
    "IS",
    "ABOVE(",
    "WITHIN(",
    "CHECKPOINT(",
    "cp.k",
    "*",
    "é",
    "\t",
];

fn store_with(points: &[(u64, f64)]) -> MetricsStore {
    let store = MetricsStore::new();
    store.declare("m");
    for &(at, v) in points {
        store.ingest(MetricPoint::new("m", v, Timestamp(at)));
    }
    store
}

fn sorted_points() -> impl Strategy<Value = Vec<(u64, f64)>> {
    prop::collection::vec((0u64..20_000, -100i32..100), 0..=10).prop_map(|mut v| {
        v.sort_by_key(|p| p.0);
        v.into_iter().map(|(t, x)| (t, f64::from(x) / 4.0)).collect()
    })
}

fn reduce_by_hand(reducer: Reducer, values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(match reducer {
        Reducer::Max => sorted[sorted.len() - 1],
        Reducer::Min => sorted[0],
        Reducer::Sum => values.iter().sum(),
        Reducer::Avg => values.iter().sum::<f64>() / values.len() as f64,
        Reducer::Last => values[values.len() - 1],
        Reducer::Count => values.len() as f64,
    })
}

fn metrics(text: &str) -> MetricsExpr {
    match parse(text) {
        Expression::Metrics(m) => m,
        other => panic!("{text} parsed as {other:?}"),
    }
}

proptest! {
    #[test]
    fn parsing_is_total_with_in_bounds_errors(parts in prop::collection::vec(prop::sample::select(ALPHABET), 0..14)) {
        let text: String = parts.concat();
        if let Err(e) = parse_expression(&ExpressionSource::new(&text)) {
            prop_assert!(e.position <= text.chars().count(), "{text:?} -> {e}");
        }
    }

    #[test]
    fn state_evaluation_matches_truth(a in ast(), phases in prop::collection::vec(phase(), 0..5)) {
        let Expression::State(e) = parse(&a.text()) else { panic!() };
        prop_assert_eq!(eval_state(&e, &jobs(&phases)), a.truth(&phases), "{}", a.text());
    }

    #[test]
    fn failed_threshold_stays_fired_as_jobs_fail(
        phases in prop::collection::vec(phase(), 1..6),
        order in Just(()).prop_perturb(|_, mut rng| rng.next_u64()),
        k in 0i64..6,
    ) {
        let Expression::State(e) = parse(&format!(".state.failed() > {k}")) else { panic!() };
        let mut now = phases.clone();
        let mut fired = eval_state(&e, &jobs(&now));
        let mut i = (order as usize) % now.len();
        for _ in 0..now.len() {
            now[i] = Phase::Failed;
            let next = eval_state(&e, &jobs(&now));
            prop_assert!(!fired || next);
            fired = next;
            i = (i + 1) % now.len();
        }
    }

    #[test]
    fn reducers_match_hand_computation(
        points in sorted_points(),
        reducer in prop::sample::select(Reducer::ALL.to_vec()),
        offset_s in 1u64..20,
        now in 0u64..25_000,
    ) {
        let store = store_with(&points);
        let m = metrics(&format!("{reducer}() QUERY(m, {offset_s}s, now) IS ABOVE(0)"));
        let from = now.saturating_sub(offset_s * 1000);
        let window: Vec<f64> = points.iter().filter(|(t, _)| *t >= from && *t <= now).map(|p| p.1).collect();
        let got = m.query.reduce(&store, Timestamp(now)).unwrap();
        let want = reduce_by_hand(reducer, &window);
        match (got, want) {
            (Some(g), Some(w)) => prop_assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{g} vs {w}"),
            (g, w) => prop_assert_eq!(g, w),
        }
    }

    #[test]
    fn conditions_match_hand_computation(
        points in sorted_points(),
        lo in -30i32..30,
        width in -5i32..30,
        cond in 0usize..4,
    ) {
        let store = store_with(&points);
        let (lo, hi) = (f64::from(lo), f64::from(lo + width));
        let text = match cond {
            0 => format!("MAX() QUERY(m, 20s, now) IS ABOVE({lo})"),
            1 => format!("MAX() QUERY(m, 20s, now) IS BELOW({lo})"),
            // Literal bounds are checked at parse time, so ranges go through
            // checkpoints to exercise the evaluation-time check.
            2 => "MAX() QUERY(m, 20s, now) IS WITHIN(CHECKPOINT(cp.lo), CHECKPOINT(cp.hi))".to_string(),
            _ => "MAX() QUERY(m, 20s, now) IS OUTSIDE(CHECKPOINT(cp.lo), CHECKPOINT(cp.hi))".to_string(),
        };
        let m = metrics(&text);
        let mut cps = BTreeMap::new();
        cps.insert(("cp".to_string(), "lo".to_string()), lo);
        cps.insert(("cp".to_string(), "hi".to_string()), hi);
        let got = eval_metrics(&m, &store, Timestamp(20_000), &cps);
        let max = points.iter().map(|p| p.1).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        match max {
            None => prop_assert_eq!(got, Ok(false)),
            Some(v) => match cond {
                0 => prop_assert_eq!(got, Ok(v > lo)),
                1 => prop_assert_eq!(got, Ok(v < lo)),
                _ if lo >= hi => prop_assert!(got.is_err()),
                2 => prop_assert_eq!(got, Ok(lo < v && v < hi)),
                _ => prop_assert_eq!(got, Ok(v < lo || v > hi)),
            },
        }
    }

    #[test]
    fn literal_empty_ranges_are_rejected_when_parsed(lo in -30i32..30, width in -10i32..=0) {
        let text = format!("MAX() QUERY(m, 20s, now) IS WITHIN({lo}, {})", lo + width);
        prop_assert!(parse_expression(&ExpressionSource::new(&text)).is_err());
    }

    #[test]
    fn checkpoint_thresholds_behave_like_their_values(
        points in sorted_points(),
        base in -20i32..20,
        factor in prop::sample::select(vec![0.5, 1.0, 1.2, 2.0]),
    ) {
        let store = store_with(&points);
        let mut cps = BTreeMap::new();
        cps.insert(("cp".to_string(), "k".to_string()), f64::from(base));
        let via_cp = metrics(&format!("MAX() QUERY(m, 20s, now) IS ABOVE(CHECKPOINT(cp.k) * {factor})"));
        let literal = metrics(&format!("MAX() QUERY(m, 20s, now) IS ABOVE({})", f64::from(base) * factor));
        prop_assert_eq!(
            eval_metrics(&via_cp, &store, Timestamp(20_000), &cps),
            eval_metrics(&literal, &store, Timestamp(20_000), &BTreeMap::new())
        );
    }

    #[test]
    fn scoped_references_stay_in_reach(
        parents in prop::collection::vec(0usize..100, 1..8),
        owner in 0usize..9,
        target in 0usize..9,
    ) {
        // Node i + 1 hangs under an earlier node; node 0 is the scenario.
        let mut tree = ResourceTree::new("n0");
        let mut owners = vec![None];
        for (i, p) in parents.iter().enumerate() {
            let parent = p % (i + 1);
            tree.add_child(tree.id(&format!("n{parent}")).unwrap(), &format!("n{}", i + 1), NodeKind::Cluster, 0);
            owners.push(Some(parent));
        }
        let (owner, target) = (owner % owners.len(), target % owners.len());
        let mut reachable = owner == 0;
        let mut at = Some(target);
        while let Some(n) = at {
            reachable |= n == owner;
            at = owners[n];
        }
        let (o, t) = (format!("n{owner}"), format!("n{target}"));
        let e = parse(&format!(".action.{t}.state.failed() > 0"));
        prop_assert_eq!(check_scope(&e, &o, &tree).is_empty(), reachable);
        let snap = ScopeSnapshot::capture(&tree, &o, std::slice::from_ref(&t));
        prop_assert_eq!(snap.nested.contains_key(&t), reachable);
    }
}
