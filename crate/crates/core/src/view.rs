//! Read models handed to clients: the state view and the process graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::activity::ExecutionRecord;
use crate::context::{BindingChange, ExternalEvent};
use crate::engine::{Decision, LogEntry, Session, SessionStatus, WatchSample};
use crate::rules::{print_rule, RuleKind};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NodeClass {
    JustExecuted,
    ExecutedThisInstance,
    PreviousInstancesOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GraphNode {
    pub id: String,
    pub class: NodeClass,
    /// 1-based step of first execution in the current instance.
    pub first_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub in_current: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl ProcessGraph {
    /// Union of the current trace and earlier traces of the same scenario.
    pub fn build<'a>(current: &[String], previous: impl IntoIterator<Item = &'a [String]>) -> ProcessGraph {
        let mut first_step: BTreeMap<&str, u64> = BTreeMap::new();
        for (i, a) in current.iter().enumerate() {
            first_step.entry(a).or_insert(i as u64 + 1);
        }
        let mut ids: BTreeSet<String> = current.iter().cloned().collect();
        let mut edges: BTreeMap<(String, String), bool> = BTreeMap::new();
        for w in current.windows(2) {
            edges.insert((w[0].clone(), w[1].clone()), true);
        }
        for seq in previous {
            ids.extend(seq.iter().cloned());
            for w in seq.windows(2) {
                edges.entry((w[0].clone(), w[1].clone())).or_insert(false);
            }
        }
        let last = current.last();
        let nodes = ids
            .into_iter()
            .map(|id| {
                let class = if Some(&id) == last {
                    NodeClass::JustExecuted
                } else if first_step.contains_key(id.as_str()) {
                    NodeClass::ExecutedThisInstance
                } else {
                    NodeClass::PreviousInstancesOnly
                };
                GraphNode {
                    first_step: first_step.get(id.as_str()).copied(),
                    id,
                    class,
                }
            })
            .collect();
        ProcessGraph {
            nodes,
            edges: edges
                .into_iter()
                .map(|((from, to), in_current)| GraphEdge { from, to, in_current })
                .collect(),
        }
    }

    pub fn class_of(&self, id: &str) -> Option<NodeClass> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.class)
    }
}

/// Position a client has already seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Cursor {
    pub revision: u64,
    pub step_index: u64,
}

impl std::str::FromStr for Cursor {
    type Err = String;

    /// Parses `revision,stepIndex`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, k) = s.split_once(',').ok_or("expected 'revision,stepIndex'")?;
        Ok(Cursor {
            revision: r.trim().parse().map_err(|_| format!("bad revision '{r}'"))?,
            step_index: k.trim().parse().map_err(|_| format!("bad step index '{k}'"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleView {
    pub id: String,
    pub kind: RuleKind,
    pub enabled: bool,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RulesView {
    pub revision: u64,
    pub rules: Vec<RuleView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WatchView {
    pub id: String,
    pub expr: String,
    pub last_value: Option<Value>,
    pub history: Vec<WatchSample>,
}

/// Everything a client displays for one session.
///
/// With a `since` cursor, `rules` is omitted if the revision is unchanged,
/// `records` holds only records after `stepIndex`, and `log` only entries
/// written at or after that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StateView {
    pub cursor: Cursor,
    pub delta: bool,
    pub instance_id: String,
    pub scenario_hash: String,
    pub status: SessionStatus,
    pub clock: u64,
    pub total_cost: f64,
    pub total_time: u64,
    pub rules: Option<RulesView>,
    pub context: BTreeMap<String, Value>,
    pub last_diff: Vec<BindingChange>,
    pub events: Vec<ExternalEvent>,
    pub records: Vec<ExecutionRecord>,
    pub process_graph: ProcessGraph,
    pub watch_points: Vec<WatchView>,
    pub log: Vec<LogEntry>,
    pub decision: Option<Decision>,
    pub fault: Option<String>,
}

impl StateView {
    pub fn build<'a>(
        s: &Session,
        previous: impl IntoIterator<Item = &'a [String]>,
        since: Option<Cursor>,
    ) -> StateView {
        let cursor = Cursor {
            revision: s.rules().revision(),
            step_index: s.trace().len() as u64,
        };
        let from_step = since.map_or(0, |c| c.step_index.min(cursor.step_index));
        let rules = match since {
            Some(c) if c.revision == cursor.revision => None,
            _ => Some(RulesView {
                revision: cursor.revision,
                rules: s
                    .rules()
                    .iter()
                    .map(|r| RuleView {
                        id: r.id.clone(),
                        kind: r.kind(),
                        enabled: r.enabled,
                        source: print_rule(r),
                    })
                    .collect(),
            }),
        };
        StateView {
            cursor,
            delta: since.is_some(),
            instance_id: s.instance_id().to_owned(),
            scenario_hash: s.scenario().hash.clone(),
            status: s.status(),
            clock: s.clock(),
            total_cost: s.total_cost(),
            total_time: s.total_time(),
            rules,
            context: s.current_snapshot().bindings().clone(),
            last_diff: s.last_diff().to_vec(),
            events: s.external().applied().to_vec(),
            records: s.trace()[from_step as usize..].to_vec(),
            process_graph: ProcessGraph::build(s.activity_sequence(), previous),
            watch_points: s
                .watches()
                .iter()
                .map(|w| WatchView {
                    id: w.id.clone(),
                    expr: w.source.clone(),
                    last_value: w.last_value.clone(),
                    history: w.history.clone(),
                })
                .collect(),
            log: s.log().iter().filter(|e| e.step >= from_step).cloned().collect(),
            decision: s.decision().cloned(),
            fault: s.fault().map(ToString::to_string),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn classification_follows_trace_and_history() {
        let cur = seq(&["ReceiveOrder", "CheckStock", "ShipOrder"]);
        let old = seq(&["ReceiveOrder", "CheckStock", "ReplenishStock", "ShipOrder"]);
        let g = ProcessGraph::build(&cur, [old.as_slice()]);
        assert_eq!(g.class_of("ShipOrder"), Some(NodeClass::JustExecuted));
        assert_eq!(g.class_of("ReceiveOrder"), Some(NodeClass::ExecutedThisInstance));
        assert_eq!(g.class_of("CheckStock"), Some(NodeClass::ExecutedThisInstance));
        assert_eq!(g.class_of("ReplenishStock"), Some(NodeClass::PreviousInstancesOnly));
        assert!(g.edges.contains(&GraphEdge {
            from: "CheckStock".into(),
            to: "ReplenishStock".into(),
            in_current: false
        }));
        assert!(g.edges.contains(&GraphEdge {
            from: "CheckStock".into(),
            to: "ShipOrder".into(),
            in_current: true
        }));
    }

    #[test]
    fn fresh_session_shows_history_grey_and_empty_is_empty() {
        let old = seq(&["A", "B"]);
        let g = ProcessGraph::build(&[], [old.as_slice()]);
        assert!(g.nodes.iter().all(|n| n.class == NodeClass::PreviousInstancesOnly));
        assert_eq!(ProcessGraph::build(&[], []), ProcessGraph::default());
    }

    #[test]
    fn repeated_last_activity_is_just_executed() {
        let g = ProcessGraph::build(&seq(&["A", "B", "A"]), []);
        assert_eq!(g.class_of("A"), Some(NodeClass::JustExecuted));
        assert_eq!(g.nodes[0].first_step, Some(1));
    }

    #[test]
    fn cursor_parses() {
        assert_eq!(
            "3, 7".parse::<Cursor>().unwrap(),
            Cursor {
                revision: 3,
                step_index: 7
            }
        );
        assert!("3".parse::<Cursor>().is_err());
    }
}
