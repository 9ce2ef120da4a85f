//! Shared phase field, ownership tree and failure classification.
//!
//! Every managed resource carries the same five-value [`Phase`]. Parents
//! derive their phase from their children with [`aggregate_phase`], and a
//! failing leaf is attributed to a fault only when it carries a matching
//! chaos tag placed before the fault was injected.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Metadata key under which the chaos tag is stored on a service node.
pub const CHAOS_TAG_KEY: &str = "metadata.Chaos";
const CHAOS_SOURCE_KEY: &str = "metadata.Chaos.source";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Uninitialized,
    Pending,
    Running,
    Success,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Uninitialized,
        Phase::Pending,
        Phase::Running,
        Phase::Success,
        Phase::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Success | Phase::Failed)
    }

    fn rank(self) -> u8 {
        match self {
            Phase::Uninitialized => 0,
            Phase::Pending => 1,
            Phase::Running => 2,
            Phase::Success | Phase::Failed => 3,
        }
    }

    /// Single legal edge of the lifecycle graph.
    pub fn can_transition_to(self, to: Phase) -> bool {
        matches!(
            (self, to),
            (Phase::Uninitialized, Phase::Pending)
                | (Phase::Pending, Phase::Running)
                | (Phase::Running, Phase::Success)
                | (Phase::Running, Phase::Failed)
        )
    }

    /// Legal intermediate steps from `self` to `to`, excluding `self`.
    ///
    /// `None` when `to` is behind `self` or on the other terminal branch.
    pub fn path_to(self, to: Phase) -> Option<Vec<Phase>> {
        if self == to || self.is_terminal() || to.rank() <= self.rank() {
            return None;
        }
        let mut path = Vec::new();
        let mut at = self;
        while at != to {
            at = match at {
                Phase::Uninitialized => Phase::Pending,
                Phase::Pending => Phase::Running,
                Phase::Running => to,
                Phase::Success | Phase::Failed => unreachable!(),
            };
            path.push(at);
        }
        Some(path)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Uninitialized => "Uninitialized",
            Phase::Pending => "Pending",
            Phase::Running => "Running",
            Phase::Success => "Success",
            Phase::Failed => "Failed",
        }
    }

    pub fn parse(text: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.as_str() == text)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureClass {
    Expected,
    Unexpected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Kill,
    Partition,
    Suspend,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::Kill, FaultKind::Partition, FaultKind::Suspend];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::Kill => "kill",
            FaultKind::Partition => "partition",
            FaultKind::Suspend => "suspend",
        }
    }

    pub fn parse(text: &str) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.as_str() == text)
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How an executor saw a job die.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureMode {
    Kill,
    Partition,
    Suspend,
    Crash,
}

impl FailureMode {
    pub const ALL: [FailureMode; 4] = [
        FailureMode::Kill,
        FailureMode::Partition,
        FailureMode::Suspend,
        FailureMode::Crash,
    ];

    pub fn fault(self) -> Option<FaultKind> {
        match self {
            FailureMode::Kill => Some(FaultKind::Kill),
            FailureMode::Partition => Some(FaultKind::Partition),
            FailureMode::Suspend => Some(FaultKind::Suspend),
            FailureMode::Crash => None,
        }
    }
}

impl From<FaultKind> for FailureMode {
    fn from(kind: FaultKind) -> Self {
        match kind {
            FaultKind::Kill => FailureMode::Kill,
            FaultKind::Partition => FailureMode::Partition,
            FaultKind::Suspend => FailureMode::Suspend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChaosTag {
    pub fault: FaultKind,
    /// Chaos action that scheduled the fault.
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Scenario,
    Service,
    Cluster,
    Call,
    /// One invocation of a callable on one service, owned by a Call.
    Job,
    Chaos,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceNode {
    pub name: String,
    pub kind: NodeKind,
    pub phase: Phase,
    pub class: Option<FailureClass>,
    pub owner: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub meta: BTreeMap<String, String>,
    pub failure_reason: Option<String>,
    /// Leaf that caused this node to fail, for aggregated failures.
    pub culprit: Option<String>,
    /// Expected child failures absorbed before this node fails.
    pub tolerated: usize,
}

impl ResourceNode {
    pub fn chaos_tag(&self) -> Option<ChaosTag> {
        let fault = FaultKind::parse(self.meta.get(CHAOS_TAG_KEY)?)?;
        let source = self.meta.get(CHAOS_SOURCE_KEY).cloned().unwrap_or_default();
        Some(ChaosTag { fault, source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub node: String,
    pub from: Phase,
    pub to: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<FailureClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LifecycleError {
    #[error("illegal transition of {node}: {from} -> {to}")]
    IllegalTransition { node: String, from: Phase, to: Phase },
    #[error("unknown service: {0}")]
    UnknownService(String),
    #[error("unknown resource: {0}")]
    UnknownNode(String),
}

/// Ownership tree rooted at the scenario node.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceTree {
    nodes: Vec<ResourceNode>,
    by_name: BTreeMap<String, NodeId>,
}

impl ResourceTree {
    pub fn new(scenario: &str) -> Self {
        let root = ResourceNode {
            name: scenario.to_string(),
            kind: NodeKind::Scenario,
            phase: Phase::Uninitialized,
            class: None,
            owner: None,
            children: Vec::new(),
            meta: BTreeMap::new(),
            failure_reason: None,
            culprit: None,
            tolerated: 0,
        };
        let mut by_name = BTreeMap::new();
        by_name.insert(scenario.to_string(), NodeId(0));
        ResourceTree {
            nodes: vec![root],
            by_name,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn add_child(&mut self, owner: NodeId, name: &str, kind: NodeKind, tolerated: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(ResourceNode {
            name: name.to_string(),
            kind,
            phase: Phase::Uninitialized,
            class: None,
            owner: Some(owner),
            children: Vec::new(),
            meta: BTreeMap::new(),
            failure_reason: None,
            culprit: None,
            tolerated,
        });
        self.nodes[owner.0].children.push(id);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: NodeId) -> &ResourceNode {
        &self.nodes[id.0]
    }

    pub fn get_mut(&mut self, id: NodeId) -> &mut ResourceNode {
        &mut self.nodes[id.0]
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&ResourceNode> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &ResourceNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &ResourceNode> {
        self.nodes[id.0].children.iter().map(|c| &self.nodes[c.0])
    }

    /// True when `id` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn is_within(&self, id: NodeId, ancestor: NodeId) -> bool {
        let mut at = Some(id);
        while let Some(n) = at {
            if n == ancestor {
                return true;
            }
            at = self.nodes[n.0].owner;
        }
        false
    }

    /// Applies one legal edge.
    pub fn transition(&mut self, id: NodeId, to: Phase) -> Result<TransitionRecord, LifecycleError> {
        let node = &mut self.nodes[id.0];
        if !node.phase.can_transition_to(to) {
            return Err(LifecycleError::IllegalTransition {
                node: node.name.clone(),
                from: node.phase,
                to,
            });
        }
        let from = node.phase;
        node.phase = to;
        Ok(TransitionRecord {
            node: node.name.clone(),
            from,
            to,
            class: None,
            reason: None,
        })
    }

    /// Walks every intermediate edge from the current phase to `to`.
    pub fn advance(&mut self, id: NodeId, to: Phase) -> Result<Vec<TransitionRecord>, LifecycleError> {
        let from = self.nodes[id.0].phase;
        if from == to {
            return Ok(Vec::new());
        }
        let path = from.path_to(to).ok_or_else(|| LifecycleError::IllegalTransition {
            node: self.nodes[id.0].name.clone(),
            from,
            to,
        })?;
        path.into_iter().map(|p| self.transition(id, p)).collect()
    }

    /// Drives a node to Failed and records why.
    pub fn fail(
        &mut self,
        id: NodeId,
        class: FailureClass,
        reason: &str,
    ) -> Result<Vec<TransitionRecord>, LifecycleError> {
        let mut records = self.advance(id, Phase::Failed)?;
        let node = &mut self.nodes[id.0];
        node.class = Some(class);
        node.failure_reason = Some(reason.to_string());
        if node.culprit.is_none() {
            node.culprit = Some(node.name.clone());
        }
        if let Some(last) = records.last_mut() {
            last.class = Some(class);
            last.reason = Some(reason.to_string());
        }
        Ok(records)
    }

    /// Marks a service node with a chaos tag ahead of fault injection.
    pub fn tag_chaos_target(&mut self, target: &str, tag: &ChaosTag) -> Result<NodeId, LifecycleError> {
        let id = self.service_id(target)?;
        let meta = &mut self.nodes[id.0].meta;
        meta.insert(CHAOS_TAG_KEY.to_string(), tag.fault.as_str().to_string());
        meta.insert(CHAOS_SOURCE_KEY.to_string(), tag.source.clone());
        Ok(id)
    }

    /// Removes the chaos tag once the fault window closes.
    pub fn revoke_chaos_tag(&mut self, target: &str) -> Result<Option<ChaosTag>, LifecycleError> {
        let id = self.service_id(target)?;
        let previous = self.nodes[id.0].chaos_tag();
        let meta = &mut self.nodes[id.0].meta;
        meta.remove(CHAOS_TAG_KEY);
        meta.remove(CHAOS_SOURCE_KEY);
        Ok(previous)
    }

    fn service_id(&self, name: &str) -> Result<NodeId, LifecycleError> {
        match self.id(name) {
            Some(id) if self.nodes[id.0].kind == NodeKind::Service => Ok(id),
            _ => Err(LifecycleError::UnknownService(name.to_string())),
        }
    }

    /// Re-aggregates every ancestor of `leaf`, bottom-up.
    ///
    /// Phases only move forward; an aggregate behind a node's current phase
    /// leaves it untouched.
    pub fn propagate(&mut self, leaf: NodeId) -> Result<Vec<TransitionRecord>, LifecycleError> {
        let mut records = Vec::new();
        let mut at = self.nodes[leaf.0].owner;
        while let Some(id) = at {
            records.extend(self.reaggregate(id)?);
            at = self.nodes[id.0].owner;
        }
        Ok(records)
    }

    fn reaggregate(&mut self, id: NodeId) -> Result<Vec<TransitionRecord>, LifecycleError> {
        let node = &self.nodes[id.0];
        if node.children.is_empty() || node.phase.is_terminal() {
            return Ok(Vec::new());
        }
        let inputs: Vec<(Phase, Option<FailureClass>)> = self.children(id).map(|c| (c.phase, c.class)).collect();
        let target = aggregate_phase(&inputs, node.tolerated);
        if target.rank() <= node.phase.rank() {
            return Ok(Vec::new());
        }
        if target == Phase::Failed {
            let culprit = self.first_culprit(id);
            let reason = match &culprit {
                Some((name, Some(why))) => format!("{name} failed: {why}"),
                Some((name, None)) => format!("{name} failed"),
                None => "child failures exceed tolerance".to_string(),
            };
            let records = self.fail(id, FailureClass::Unexpected, &reason)?;
            self.nodes[id.0].culprit = culprit.map(|(name, _)| name);
            Ok(records)
        } else {
            self.advance(id, target)
        }
    }

    /// Culpable leaf under `id`: an unexpected failure if any, else the
    /// last expected one (the one that broke tolerance).
    fn first_culprit(&self, id: NodeId) -> Option<(String, Option<String>)> {
        let failed: Vec<&ResourceNode> = self.children(id).filter(|c| c.phase == Phase::Failed).collect();
        let pick = failed
            .iter()
            .find(|c| c.class != Some(FailureClass::Expected))
            .or_else(|| failed.last())?;
        let name = pick.culprit.clone().unwrap_or_else(|| pick.name.clone());
        let reason = self
            .node(&name)
            .and_then(|n| n.failure_reason.clone())
            .or_else(|| pick.failure_reason.clone());
        Some((name, reason))
    }
}

/// Derives a parent's phase from its children.
///
/// Failed children without a class count as unexpected.
pub fn aggregate_phase(children: &[(Phase, Option<FailureClass>)], tolerated: usize) -> Phase {
    let mut unexpected = 0usize;
    let mut expected = 0usize;
    let mut waiting = false;
    let mut done = 0usize;
    for &(phase, class) in children {
        match phase {
            Phase::Failed if class == Some(FailureClass::Expected) => expected += 1,
            Phase::Failed => unexpected += 1,
            Phase::Uninitialized | Phase::Pending => waiting = true,
            Phase::Success => done += 1,
            Phase::Running => {}
        }
    }
    if unexpected > 0 || expected > tolerated {
        Phase::Failed
    } else if waiting {
        Phase::Pending
    } else if done + expected == children.len() {
        Phase::Success
    } else {
        Phase::Running
    }
}

/// Expected iff the node carries a tag for the same kind of fault.
pub fn classify_failure(node: &ResourceNode, observed: FailureMode) -> FailureClass {
    match (node.chaos_tag(), observed.fault()) {
        (Some(tag), Some(kind)) if tag.fault == kind => FailureClass::Expected,
        _ => FailureClass::Unexpected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(n: usize, tolerated: usize) -> (ResourceTree, NodeId, Vec<NodeId>) {
        let mut tree = ResourceTree::new("scenario");
        let root = tree.root();
        let c = tree.add_child(root, "masters", NodeKind::Cluster, tolerated);
        let kids = (0..n)
            .map(|i| tree.add_child(c, &format!("masters-{i}"), NodeKind::Service, 0))
            .collect::<Vec<_>>();
        for id in [root, c].into_iter().chain(kids.iter().copied()) {
            tree.advance(id, Phase::Running).unwrap();
        }
        (tree, c, kids)
    }

    #[test]
    fn legal_and_illegal_edges() {
        let mut tree = ResourceTree::new("s");
        let n = tree.add_child(tree.root(), "a", NodeKind::Service, 0);
        assert_eq!(tree.transition(n, Phase::Pending).unwrap().from, Phase::Uninitialized);
        assert!(tree.transition(n, Phase::Running).is_ok());
        assert!(tree.transition(n, Phase::Success).is_ok());
        assert_eq!(
            tree.transition(n, Phase::Failed),
            Err(LifecycleError::IllegalTransition {
                node: "a".into(),
                from: Phase::Success,
                to: Phase::Failed
            })
        );
        assert!(tree.transition(n, Phase::Running).is_err());
    }

    #[test]
    fn advance_walks_intermediate_phases() {
        let mut tree = ResourceTree::new("s");
        let n = tree.add_child(tree.root(), "a", NodeKind::Call, 0);
        let recs = tree.advance(n, Phase::Failed).unwrap();
        let tos: Vec<Phase> = recs.iter().map(|r| r.to).collect();
        assert_eq!(tos, [Phase::Pending, Phase::Running, Phase::Failed]);
        assert!(tree.advance(n, Phase::Running).is_err());
    }

    #[test]
    fn aggregate_examples() {
        use FailureClass::*;
        let s = (Phase::Success, None);
        assert_eq!(aggregate_phase(&[s, s, s], 0), Phase::Success);
        assert_eq!(aggregate_phase(&[s, (Phase::Running, None), s], 0), Phase::Running);
        let exp = (Phase::Failed, Some(Expected));
        assert_eq!(aggregate_phase(&[s, exp, s], 1), Phase::Success);
        assert_eq!(aggregate_phase(&[s, exp, s], 0), Phase::Failed);
        assert_eq!(
            aggregate_phase(&[s, (Phase::Failed, Some(Unexpected))], 3),
            Phase::Failed
        );
        assert_eq!(aggregate_phase(&[s, (Phase::Pending, None)], 0), Phase::Pending);
        assert_eq!(aggregate_phase(&[], 0), Phase::Success);
    }

    #[test]
    fn tag_and_revoke() {
        let (mut tree, _, kids) = cluster(4, 0);
        let tag = ChaosTag {
            fault: FaultKind::Kill,
            source: "kill0".into(),
        };
        tree.tag_chaos_target("masters-0", &tag).unwrap();
        assert_eq!(
            tree.get(kids[0]).meta.get(CHAOS_TAG_KEY).map(String::as_str),
            Some("kill")
        );
        assert_eq!(tree.get(kids[0]).chaos_tag(), Some(tag.clone()));
        assert_eq!(
            tree.tag_chaos_target("ghost-0", &tag),
            Err(LifecycleError::UnknownService("ghost-0".into()))
        );
        // clusters are not services
        assert!(tree.tag_chaos_target("masters", &tag).is_err());
        assert_eq!(tree.revoke_chaos_tag("masters-0").unwrap(), Some(tag));
        assert!(tree.get(kids[0]).chaos_tag().is_none());
        assert!(!tree.get(kids[0]).meta.contains_key(CHAOS_TAG_KEY));
    }

    #[test]
    fn classification_truth_table() {
        let (mut tree, _, kids) = cluster(1, 0);
        let node = tree.get(kids[0]).clone();
        for mode in FailureMode::ALL {
            assert_eq!(classify_failure(&node, mode), FailureClass::Unexpected);
        }
        for kind in FaultKind::ALL {
            tree.tag_chaos_target(
                "masters-0",
                &ChaosTag {
                    fault: kind,
                    source: "f".into(),
                },
            )
            .unwrap();
            let node = tree.get(kids[0]).clone();
            for mode in FailureMode::ALL {
                let expected = if mode.fault() == Some(kind) {
                    FailureClass::Expected
                } else {
                    FailureClass::Unexpected
                };
                assert_eq!(classify_failure(&node, mode), expected, "{kind:?} {mode:?}");
            }
        }
    }

    #[test]
    fn unexpected_leaf_fails_cluster_and_scenario() {
        let (mut tree, c, kids) = cluster(4, 0);
        tree.fail(kids[0], FailureClass::Unexpected, "exit=1").unwrap();
        let recs = tree.propagate(kids[0]).unwrap();
        assert_eq!(tree.get(c).phase, Phase::Failed);
        assert_eq!(tree.get(tree.root()).phase, Phase::Failed);
        assert_eq!(tree.get(tree.root()).culprit.as_deref(), Some("masters-0"));
        assert!(recs.iter().any(|r| r.node == "scenario" && r.to == Phase::Failed));
        assert!(tree.get(c).failure_reason.as_deref().unwrap().contains("exit=1"));
    }

    #[test]
    fn expected_leaf_within_tolerance_keeps_running() {
        let (mut tree, c, kids) = cluster(4, 1);
        tree.tag_chaos_target(
            "masters-0",
            &ChaosTag {
                fault: FaultKind::Partition,
                source: "p".into(),
            },
        )
        .unwrap();
        let class = classify_failure(tree.get(kids[0]), FailureMode::Partition);
        assert_eq!(class, FailureClass::Expected);
        tree.fail(kids[0], class, "partitioned").unwrap();
        assert!(tree.propagate(kids[0]).unwrap().is_empty());
        assert_eq!(tree.get(c).phase, Phase::Running);
        assert_eq!(tree.get(tree.root()).phase, Phase::Running);
    }

    #[test]
    fn propagate_on_lone_root_is_noop() {
        let mut tree = ResourceTree::new("s");
        let before = tree.clone();
        assert!(tree.propagate(tree.root()).unwrap().is_empty());
        assert_eq!(tree, before);
    }

    #[test]
    fn phase_names_are_stable() {
        for p in Phase::ALL {
            assert_eq!(Phase::parse(p.as_str()), Some(p));
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
    }
}
