use proptest::prelude::*;

use whatif::lifecycle::{
    aggregate_phase, classify_failure, ChaosTag, FailureClass, FailureMode, FaultKind, NodeId, NodeKind, Phase,
    ResourceTree,
};

fn phase() -> impl Strategy<Value = Phase> {
    prop::sample::select(Phase::ALL.to_vec())
}

fn class() -> impl Strategy<Value = Option<FailureClass>> {
    prop::option::of(prop::sample::select(vec![
        FailureClass::Expected,
        FailureClass::Unexpected,
    ]))
}

fn child() -> impl Strategy<Value = (Phase, Option<FailureClass>)> {
    (phase(), class()).prop_map(|(p, c)| (p, if p == Phase::Failed { c } else { None }))
}

type Child = (Phase, Option<FailureClass>);

/// The aggregation rule restated as a decision list over counts.
fn rule(children: &[(Phase, Option<FailureClass>)], tolerated: usize) -> Phase {
    let count = |f: &dyn Fn(&Child) -> bool| children.iter().filter(|c| f(c)).count();
    let unexpected = count(&|c| c.0 == Phase::Failed && c.1 != Some(FailureClass::Expected));
    let expected = count(&|c| c.0 == Phase::Failed && c.1 == Some(FailureClass::Expected));
    let waiting = count(&|c| matches!(c.0, Phase::Uninitialized | Phase::Pending));
    let succeeded = count(&|c| c.0 == Phase::Success);
    if unexpected >= 1 {
        return Phase::Failed;
    }
    if expected > tolerated {
        return Phase::Failed;
    }
    if waiting >= 1 {
        return Phase::Pending;
    }
    if succeeded + expected == children.len() {
        return Phase::Success;
    }
    Phase::Running
}

fn rank(p: Phase) -> u8 {
    match p {
        Phase::Uninitialized => 0,
        Phase::Pending => 1,
        Phase::Running => 2,
        Phase::Success | Phase::Failed => 3,
    }
}

/// A generated ownership tree: internal nodes carry a tolerance, leaves a
/// final phase and class.
#[derive(Debug, Clone)]
enum Shape {
    Leaf(Phase, Option<FailureClass>),
    Inner(usize, Vec<Shape>),
}

fn shape() -> impl Strategy<Value = Shape> {
    let leaf = child().prop_map(|(p, c)| Shape::Leaf(p, c));
    leaf.prop_recursive(3, 64, 6, |inner| {
        (0usize..3, prop::collection::vec(inner, 1..=6)).prop_map(|(t, kids)| Shape::Inner(t, kids))
    })
}

fn build(tree: &mut ResourceTree, owner: NodeId, s: &Shape, counter: &mut usize, leaves: &mut Vec<NodeId>) -> NodeId {
    *counter += 1;
    let name = format!("n{counter}");
    match s {
        Shape::Leaf(p, c) => {
            let id = tree.add_child(owner, &name, NodeKind::Service, 0);
            if *p != Phase::Uninitialized {
                tree.advance(id, *p).unwrap();
            }
            tree.get_mut(id).class = *c;
            leaves.push(id);
            id
        }
        Shape::Inner(t, kids) => {
            let id = tree.add_child(owner, &name, NodeKind::Cluster, *t);
            for k in kids {
                build(tree, id, k, counter, leaves);
            }
            id
        }
    }
}

/// Bottom-up evaluation of the rule; inner nodes start Uninitialized so
/// their final phase is whatever the rule yields.
fn oracle(s: &Shape) -> (Phase, Option<FailureClass>) {
    match s {
        Shape::Leaf(p, c) => (*p, *c),
        Shape::Inner(t, kids) => {
            let inputs: Vec<_> = kids.iter().map(oracle).collect();
            let p = rule(&inputs, *t);
            (p, (p == Phase::Failed).then_some(FailureClass::Unexpected))
        }
    }
}

proptest! {
    #[test]
    fn aggregate_matches_rule(children in prop::collection::vec(child(), 0..8), tolerated in 0usize..4) {
        prop_assert_eq!(aggregate_phase(&children, tolerated), rule(&children, tolerated));
    }

    #[test]
    fn aggregate_ignores_child_order(
        children in prop::collection::vec(child(), 0..8).prop_shuffle(),
        tolerated in 0usize..4,
    ) {
        let mut sorted = children.clone();
        sorted.sort_by_key(|c| format!("{c:?}"));
        prop_assert_eq!(aggregate_phase(&children, tolerated), aggregate_phase(&sorted, tolerated));
    }

    #[test]
    fn phases_never_move_backwards(steps in prop::collection::vec(phase(), 0..20)) {
        let mut tree = ResourceTree::new("s");
        let n = tree.add_child(tree.root(), "a", NodeKind::Service, 0);
        let mut seen = vec![Phase::Uninitialized];
        for to in steps {
            let before = tree.get(n).phase;
            let moved = tree.advance(n, to);
            let after = tree.get(n).phase;
            prop_assert!(rank(after) >= rank(before));
            if before.is_terminal() {
                prop_assert_eq!(after, before);
            }
            if let Ok(records) = moved {
                for r in records {
                    prop_assert!(r.from.can_transition_to(r.to));
                    seen.push(r.to);
                }
            }
        }
        prop_assert!(seen.windows(2).all(|w| w[0].can_transition_to(w[1])), "{seen:?}");
    }

    #[test]
    fn propagate_matches_bottom_up_oracle(s in shape()) {
        let mut tree = ResourceTree::new("root");
        let mut leaves = Vec::new();
        let root = tree.root();
        let top = build(&mut tree, root, &s, &mut 0, &mut leaves);
        for leaf in leaves {
            tree.propagate(leaf).unwrap();
        }
        fn compare(tree: &ResourceTree, id: NodeId, s: &Shape) -> Result<(), TestCaseError> {
            let (p, _) = oracle(s);
            let node = tree.get(id);
            prop_assert_eq!(node.phase, p, "node {}", node.name);
            if let Shape::Inner(_, kids) = s {
                for (k, c) in node.children.iter().zip(kids) {
                    compare(tree, *k, c)?;
                }
            }
            Ok(())
        }
        compare(&tree, top, &s)?;
    }
}

#[test]
fn classification_is_exhaustively_tag_equality() {
    let tags: Vec<Option<FaultKind>> = std::iter::once(None).chain(FaultKind::ALL.map(Some)).collect();
    for tag in &tags {
        for mode in FailureMode::ALL {
            let mut tree = ResourceTree::new("s");
            tree.add_child(tree.root(), "svc", NodeKind::Service, 0);
            if let Some(fault) = tag {
                tree.tag_chaos_target(
                    "svc",
                    &ChaosTag {
                        fault: *fault,
                        source: "c".into(),
                    },
                )
                .unwrap();
            }
            let expected = match (tag, mode) {
                (Some(FaultKind::Kill), FailureMode::Kill)
                | (Some(FaultKind::Partition), FailureMode::Partition)
                | (Some(FaultKind::Suspend), FailureMode::Suspend) => FailureClass::Expected,
                _ => FailureClass::Unexpected,
            };
            assert_eq!(
                classify_failure(tree.node("svc").unwrap(), mode),
                expected,
                "{tag:?} {mode:?}"
            );
            tree.revoke_chaos_tag("svc").unwrap();
            assert_eq!(
                classify_failure(tree.node("svc").unwrap(), mode),
                FailureClass::Unexpected
            );
        }
    }
}
