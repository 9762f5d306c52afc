//! Historical instances, practice labels, and the analyses built on them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::ExecutionRecord;
use crate::engine::ScriptEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Label {
    Unlabeled,
    GoodPractice,
    BadPractice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CompletionStatus {
    GoalAchieved,
    Stuck,
    Aborted,
    Faulted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelAudit {
    pub from: Label,
    pub to: Label,
    pub actor: String,
    /// Caller-supplied timestamp, seconds since the Unix epoch.
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HistoricalInstance {
    pub instance_id: String,
    pub scenario_hash: String,
    pub scenario_name: String,
    pub seed: u64,
    pub activity_sequence: Vec<String>,
    pub records: Vec<ExecutionRecord>,
    pub total_time: u64,
    pub total_cost: f64,
    pub completion_status: CompletionStatus,
    pub label: Label,
    #[serde(default)]
    pub audit: Vec<LabelAudit>,
    #[serde(default)]
    pub command_script: Vec<ScriptEntry>,
}

impl HistoricalInstance {
    /// Elapsed time from first start to last end; zero for an empty trace.
    pub fn span(records: &[ExecutionRecord]) -> u64 {
        match (records.first(), records.last()) {
            (Some(f), Some(l)) => l.end_time - f.start_time,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("instance '{0}' is already recorded")]
    DuplicateId(String),
    #[error("unknown instance '{0}'")]
    UnknownId(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VetoDecision {
    Allowed,
    Vetoed { instance_id: String },
}

/// Per-step check that a candidate does not commit the run to a bad trace.
pub trait PracticeVeto {
    fn veto_check(&self, current: &[String], candidate: &str) -> VetoDecision;
}

/// Used where no history is consulted.
pub struct NoHistory;

impl PracticeVeto for NoHistory {
    fn veto_check(&self, _: &[String], _: &str) -> VetoDecision {
        VetoDecision::Allowed
    }
}

/// What a session needs from the shared store: the veto and replay lookup.
pub trait HistorySource {
    fn veto_check(&self, current: &[String], candidate: &str, scenario_hash: &str) -> VetoDecision;
    fn instance(&self, instance_id: &str) -> Option<HistoricalInstance>;
}

impl HistorySource for NoHistory {
    fn veto_check(&self, _: &[String], _: &str, _: &str) -> VetoDecision {
        VetoDecision::Allowed
    }
    fn instance(&self, _: &str) -> Option<HistoricalInstance> {
        None
    }
}

impl HistorySource for HistoryStore {
    fn veto_check(&self, current: &[String], candidate: &str, scenario_hash: &str) -> VetoDecision {
        HistoryStore::veto_check(self, current, candidate, scenario_hash)
    }
    fn instance(&self, instance_id: &str) -> Option<HistoricalInstance> {
        self.get(instance_id).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    MinCost,
    MinTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelMetrics {
    pub count: usize,
    pub total_time: Option<Aggregate>,
    pub total_cost: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub scenario_hash: String,
    pub all: LabelMetrics,
    pub by_label: BTreeMap<Label, LabelMetrics>,
}

fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let sum: f64 = values.iter().sum();
    Some(Aggregate {
        mean: sum / values.len() as f64,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn label_metrics<'a>(it: impl Iterator<Item = &'a HistoricalInstance>) -> LabelMetrics {
    let (times, costs): (Vec<f64>, Vec<f64>) = it.map(|i| (i.total_time as f64, i.total_cost)).unzip();
    LabelMetrics {
        count: times.len(),
        total_time: aggregate(&times),
        total_cost: aggregate(&costs),
    }
}

/// Append-only instance store partitioned by scenario hash.
///
/// Instances are never removed; only labels change.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryStore {
    instances: Vec<HistoricalInstance>,
    index: HashMap<String, usize>,
    by_scenario: BTreeMap<String, Vec<usize>>,
    /// Positions of bad-practice instances per scenario, kept in step with labels.
    bad: HashMap<String, BTreeSet<usize>>,
    next_seq: u64,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Every instance in recording order.
    pub fn instances(&self) -> &[HistoricalInstance] {
        &self.instances
    }

    pub fn get(&self, id: &str) -> Option<&HistoricalInstance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    pub fn scenario(&self, scenario_hash: &str) -> impl Iterator<Item = &HistoricalInstance> {
        self.by_scenario
            .get(scenario_hash)
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    pub fn scenario_hashes(&self) -> impl Iterator<Item = &str> {
        self.by_scenario.keys().map(String::as_str)
    }

    /// Hands out the next `inst-NNNNNN` id not yet used by this store.
    pub fn allocate_instance_id(&mut self) -> String {
        loop {
            self.next_seq += 1;
            let id = format!("inst-{:06}", self.next_seq);
            if !self.index.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn record(&mut self, instance: HistoricalInstance) -> Result<String, HistoryError> {
        if self.index.contains_key(&instance.instance_id) {
            return Err(HistoryError::DuplicateId(instance.instance_id));
        }
        if let Some(n) = instance
            .instance_id
            .strip_prefix("inst-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            self.next_seq = self.next_seq.max(n);
        }
        let at = self.instances.len();
        let id = instance.instance_id.clone();
        self.by_scenario
            .entry(instance.scenario_hash.clone())
            .or_default()
            .push(at);
        self.index.insert(id.clone(), at);
        if instance.label == Label::BadPractice {
            self.bad.entry(instance.scenario_hash.clone()).or_default().insert(at);
        }
        self.instances.push(instance);
        Ok(id)
    }

    pub fn label(&mut self, instance_id: &str, label: Label, actor: &str, at: u64) -> Result<(), HistoryError> {
        let i = *self
            .index
            .get(instance_id)
            .ok_or_else(|| HistoryError::UnknownId(instance_id.to_owned()))?;
        let inst = &mut self.instances[i];
        inst.audit.push(LabelAudit {
            from: inst.label,
            to: label,
            actor: actor.to_owned(),
            at,
        });
        inst.label = label;
        let bad = self.bad.entry(inst.scenario_hash.clone()).or_default();
        if label == Label::BadPractice {
            bad.insert(i);
        } else {
            bad.remove(&i);
        }
        Ok(())
    }

    /// Vetoed iff `current + [candidate]` equals a bad-practice trace, or is a
    /// proper prefix of one without also prefixing any good or unlabeled trace.
    pub fn veto_check(&self, current: &[String], candidate: &str, scenario_hash: &str) -> VetoDecision {
        let Some(bad) = self.bad.get(scenario_hash).filter(|b| !b.is_empty()) else {
            return VetoDecision::Allowed;
        };
        let bad: Vec<&HistoricalInstance> = bad.iter().map(|&i| &self.instances[i]).collect();
        let members = &self.by_scenario[scenario_hash];
        let len = current.len() + 1;
        let is_prefix_of =
            |seq: &[String]| seq.len() >= len && seq[..current.len()] == *current && seq[current.len()] == candidate;
        if let Some(exact) = bad
            .iter()
            .find(|b| b.activity_sequence.len() == len && is_prefix_of(&b.activity_sequence))
        {
            return VetoDecision::Vetoed {
                instance_id: exact.instance_id.clone(),
            };
        }
        let Some(prefixed) = bad.iter().find(|b| is_prefix_of(&b.activity_sequence)) else {
            return VetoDecision::Allowed;
        };
        let acceptable_shares = members
            .iter()
            .map(|&i| &self.instances[i])
            .filter(|i| i.label != Label::BadPractice)
            .any(|i| is_prefix_of(&i.activity_sequence));
        if acceptable_shares {
            VetoDecision::Allowed
        } else {
            VetoDecision::Vetoed {
                instance_id: prefixed.instance_id.clone(),
            }
        }
    }

    /// View restricted to one scenario, usable as the engine's veto oracle.
    pub fn for_scenario<'a>(&'a self, scenario_hash: &'a str) -> ScenarioHistory<'a> {
        ScenarioHistory {
            store: self,
            scenario_hash,
        }
    }

    /// Cheapest or fastest good-practice instance; ties go to the smaller id.
    pub fn pick_good_practice(&self, scenario_hash: &str, criterion: Criterion) -> Option<&HistoricalInstance> {
        self.scenario(scenario_hash)
            .filter(|i| i.label == Label::GoodPractice)
            .min_by(|a, b| {
                let key = |i: &HistoricalInstance| match criterion {
                    Criterion::MinCost => i.total_cost,
                    Criterion::MinTime => i.total_time as f64,
                };
                key(a)
                    .total_cmp(&key(b))
                    .then_with(|| a.instance_id.cmp(&b.instance_id))
            })
    }

    pub fn metrics(&self, scenario_hash: &str) -> Metrics {
        let mut by_label = BTreeMap::new();
        for label in [Label::Unlabeled, Label::GoodPractice, Label::BadPractice] {
            by_label.insert(
                label,
                label_metrics(self.scenario(scenario_hash).filter(|i| i.label == label)),
            );
        }
        Metrics {
            scenario_hash: scenario_hash.to_owned(),
            all: label_metrics(self.scenario(scenario_hash)),
            by_label,
        }
    }
}

pub struct ScenarioHistory<'a> {
    store: &'a HistoryStore,
    scenario_hash: &'a str,
}

impl PracticeVeto for ScenarioHistory<'_> {
    fn veto_check(&self, current: &[String], candidate: &str) -> VetoDecision {
        self.store.veto_check(current, candidate, self.scenario_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn inst(id: &str, seq: &[&str], label: Label, time: u64, cost: f64) -> HistoricalInstance {
        HistoricalInstance {
            instance_id: id.into(),
            scenario_hash: "h".into(),
            scenario_name: "t".into(),
            seed: 0,
            activity_sequence: seq.iter().map(|s| s.to_string()).collect(),
            records: vec![],
            total_time: time,
            total_cost: cost,
            completion_status: CompletionStatus::GoalAchieved,
            label,
            audit: vec![],
            command_script: vec![],
        }
    }

    fn seq(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn exact_bad_trace_is_vetoed() {
        let mut h = HistoryStore::new();
        h.record(inst("i1", &["A", "B", "C"], Label::BadPractice, 1, 1.0))
            .unwrap();
        assert_eq!(
            h.veto_check(&seq(&["A", "B"]), "C", "h"),
            VetoDecision::Vetoed {
                instance_id: "i1".into()
            }
        );
    }

    #[test]
    fn shared_good_prefix_is_allowed() {
        let mut h = HistoryStore::new();
        h.record(inst("i1", &["A", "B", "C"], Label::BadPractice, 1, 1.0))
            .unwrap();
        h.record(inst("i2", &["A", "B", "D"], Label::GoodPractice, 1, 1.0))
            .unwrap();
        assert_eq!(h.veto_check(&seq(&["A"]), "B", "h"), VetoDecision::Allowed);
        // the full bad trace is still blocked
        assert!(matches!(
            h.veto_check(&seq(&["A", "B"]), "C", "h"),
            VetoDecision::Vetoed { .. }
        ));
    }

    #[test]
    fn bad_prefix_without_alternative_is_vetoed() {
        let mut h = HistoryStore::new();
        h.record(inst("i1", &["A", "B", "C"], Label::BadPractice, 1, 1.0))
            .unwrap();
        assert!(matches!(
            h.veto_check(&seq(&["A"]), "B", "h"),
            VetoDecision::Vetoed { .. }
        ));
        assert!(matches!(h.veto_check(&[], "A", "h"), VetoDecision::Vetoed { .. }));
        // other scenarios are unaffected
        assert_eq!(h.veto_check(&[], "A", "other"), VetoDecision::Allowed);
    }

    #[test]
    fn empty_history_allows_everything() {
        let h = HistoryStore::new();
        assert_eq!(h.veto_check(&seq(&["A"]), "B", "h"), VetoDecision::Allowed);
    }

    #[test]
    fn relabeling_restores_behavior_and_is_audited() {
        let mut h = HistoryStore::new();
        h.record(inst("i1", &["A", "B"], Label::Unlabeled, 1, 1.0)).unwrap();
        assert_eq!(h.veto_check(&seq(&["A"]), "B", "h"), VetoDecision::Allowed);
        h.label("i1", Label::BadPractice, "analyst", 10).unwrap();
        assert!(matches!(
            h.veto_check(&seq(&["A"]), "B", "h"),
            VetoDecision::Vetoed { .. }
        ));
        h.label("i1", Label::Unlabeled, "analyst", 11).unwrap();
        assert_eq!(h.veto_check(&seq(&["A"]), "B", "h"), VetoDecision::Allowed);
        let audit = &h.get("i1").unwrap().audit;
        assert_eq!(audit.len(), 2);
        assert_eq!((audit[0].from, audit[0].to), (Label::Unlabeled, Label::BadPractice));
        assert_eq!(
            h.label("nope", Label::GoodPractice, "a", 0),
            Err(HistoryError::UnknownId("nope".into()))
        );
    }

    #[test]
    fn duplicate_record_rejected() {
        let mut h = HistoryStore::new();
        h.record(inst("i1", &[], Label::Unlabeled, 0, 0.0)).unwrap();
        assert_eq!(
            h.record(inst("i1", &[], Label::Unlabeled, 0, 0.0)),
            Err(HistoryError::DuplicateId("i1".into()))
        );
    }

    #[test]
    fn good_practice_selection() {
        let mut h = HistoryStore::new();
        assert!(h.pick_good_practice("h", Criterion::MinCost).is_none());
        h.record(inst("i2", &["A"], Label::GoodPractice, 4, 5.0)).unwrap();
        h.record(inst("i3", &["A"], Label::GoodPractice, 9, 3.0)).unwrap();
        h.record(inst("i4", &["A"], Label::BadPractice, 1, 1.0)).unwrap();
        assert_eq!(h.pick_good_practice("h", Criterion::MinCost).unwrap().instance_id, "i3");
        assert_eq!(h.pick_good_practice("h", Criterion::MinTime).unwrap().instance_id, "i2");
        h.record(inst("i1", &["A"], Label::GoodPractice, 9, 3.0)).unwrap();
        assert_eq!(h.pick_good_practice("h", Criterion::MinCost).unwrap().instance_id, "i1");
    }

    #[test]
    fn metrics_single_and_empty() {
        let mut h = HistoryStore::new();
        let m = h.metrics("h");
        assert_eq!(m.all.count, 0);
        assert!(m.all.total_time.is_none() && m.all.total_cost.is_none());
        h.record(inst("i1", &["A"], Label::Unlabeled, 7, 3.0)).unwrap();
        let m = h.metrics("h");
        let t = m.all.total_time.unwrap();
        let c = m.all.total_cost.unwrap();
        assert_eq!((t.mean, t.min, t.max), (7.0, 7.0, 7.0));
        assert_eq!((c.mean, c.min, c.max), (3.0, 3.0, 3.0));
        assert_eq!(m.by_label[&Label::GoodPractice].count, 0);
    }

    #[test]
    fn allocated_ids_skip_recorded_ones() {
        let mut h = HistoryStore::new();
        h.record(inst("inst-000002", &[], Label::Unlabeled, 0, 0.0)).unwrap();
        assert_eq!(h.allocate_instance_id(), "inst-000003");
    }
}
