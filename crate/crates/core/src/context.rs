//! Internal and external context, context rules, and immutable snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rules::{eval_condition, eval_expr, Bindings, EvalError, Rule, RuleAction, TraceView};
use crate::value::Value;

pub const DEFAULT_MAX_CONTEXT_ITERATIONS: u32 = 100;

/// State of the system's own resources and process variables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InternalContext {
    pub resources: BTreeMap<String, f64>,
    pub state: BTreeMap<String, Value>,
}

/// A scheduled or injected change to environment variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvent {
    pub at: u64,
    pub label: String,
    pub assignments: BTreeMap<String, Value>,
}

/// Environment variables plus the time-ordered event schedule.
///
/// Context rules live in the rule set and are passed in when they run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalContext {
    pub env: BTreeMap<String, Value>,
    schedule: Vec<ExternalEvent>,
    applied: usize,
}

impl ExternalContext {
    /// Builds a context whose schedule is sorted by time, ties in the given order.
    pub fn new(env: BTreeMap<String, Value>, mut events: Vec<ExternalEvent>) -> Self {
        events.sort_by_key(|e| e.at);
        ExternalContext {
            env,
            schedule: events,
            applied: 0,
        }
    }

    pub fn schedule(&self) -> &[ExternalEvent] {
        &self.schedule
    }

    pub fn applied(&self) -> &[ExternalEvent] {
        &self.schedule[..self.applied]
    }

    /// Time of the first event not yet applied.
    pub fn next_event_time(&self) -> Option<u64> {
        self.schedule.get(self.applied).map(|e| e.at)
    }

    /// Schedules an event to fire at `now`, after every event already due.
    pub fn inject(&mut self, now: u64, label: String, assignments: BTreeMap<String, Value>) {
        let at = self.schedule.partition_point(|e| e.at <= now);
        self.schedule.insert(
            at,
            ExternalEvent {
                at: now,
                label,
                assignments,
            },
        );
    }

    /// Applies every pending event with `at <= now`, in schedule order.
    pub fn apply_due_events(&mut self, now: u64) -> Vec<ExternalEvent> {
        let mut out = Vec::new();
        while let Some(ev) = self.schedule.get(self.applied) {
            if ev.at > now {
                break;
            }
            for (k, v) in &ev.assignments {
                self.env.insert(k.clone(), v.clone());
            }
            out.push(ev.clone());
            self.applied += 1;
        }
        out
    }
}

/// Read-only union of the three variable namespaces.
pub struct ContextView<'a> {
    pub internal: &'a InternalContext,
    pub external: &'a ExternalContext,
}

impl Bindings for ContextView<'_> {
    fn get(&self, name: &str) -> Option<Value> {
        if let Some(v) = self.external.env.get(name) {
            return Some(v.clone());
        }
        if let Some(q) = self.internal.resources.get(name) {
            return Some(Value::Num(*q));
        }
        self.internal.state.get(name).cloned()
    }
}

/// Bindings a context rule pass may update.
pub trait BindingsMut: Bindings {
    fn assign(&mut self, name: &str, value: Value) -> Result<(), EvalError>;
}

impl BindingsMut for BTreeMap<String, Value> {
    fn assign(&mut self, name: &str, value: Value) -> Result<(), EvalError> {
        self.insert(name.to_owned(), value);
        Ok(())
    }
}

/// Mutable view used while context rules run: reads everything, writes env vars only.
pub struct ContextMut<'a> {
    pub internal: &'a InternalContext,
    pub external: &'a mut ExternalContext,
}

impl Bindings for ContextMut<'_> {
    fn get(&self, name: &str) -> Option<Value> {
        ContextView {
            internal: self.internal,
            external: self.external,
        }
        .get(name)
    }
}

impl BindingsMut for ContextMut<'_> {
    fn assign(&mut self, name: &str, value: Value) -> Result<(), EvalError> {
        match self.external.env.get_mut(name) {
            Some(slot) if slot.value_type() == value.value_type() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(EvalError::Type(format!(
                "cannot assign {} to '{name}' of type {}",
                value.value_type(),
                slot.value_type()
            ))),
            None => Err(EvalError::Unbound(name.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("context rules did not converge within {iterations} passes; oscillating: {}", variables.join(", "))]
pub struct NonConvergence {
    pub iterations: u32,
    pub variables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextRun {
    /// Full passes performed, including the final confirming pass.
    pub iterations: u32,
    /// Rules skipped because their condition or an assignment failed to evaluate.
    pub errors: Vec<(String, EvalError)>,
}

/// Runs context rules to a fixpoint.
///
/// `rules` must already be in (-priority, id) order. Within a pass each firing
/// rule evaluates all its right-hand sides before assigning any of them, and
/// later rules see earlier rules' writes. A pass "changes nothing" when every
/// binding ends the pass with the value it started with.
pub fn run_context_rules(
    rules: &[&Rule],
    bindings: &mut dyn BindingsMut,
    trace: &dyn TraceView,
    max_iterations: u32,
) -> Result<ContextRun, NonConvergence> {
    let mut run = ContextRun::default();
    let mut seen_errors = BTreeSet::new();
    loop {
        run.iterations += 1;
        let mut before: BTreeMap<String, Option<Value>> = BTreeMap::new();
        for rule in rules {
            let RuleAction::Assign(assigns) = &rule.action else {
                continue;
            };
            let fire = match eval_condition(&rule.condition, &*bindings, trace) {
                Ok(b) => b,
                Err(e) => {
                    if seen_errors.insert(rule.id.clone()) {
                        run.errors.push((rule.id.clone(), e));
                    }
                    continue;
                }
            };
            if !fire {
                continue;
            }
            let values: Result<Vec<Value>, EvalError> =
                assigns.iter().map(|a| eval_expr(&a.value, &*bindings, trace)).collect();
            let values = match values {
                Ok(v) => v,
                Err(e) => {
                    if seen_errors.insert(rule.id.clone()) {
                        run.errors.push((rule.id.clone(), e));
                    }
                    continue;
                }
            };
            for (a, v) in assigns.iter().zip(values) {
                let old = bindings.get(&a.target);
                if let Err(e) = bindings.assign(&a.target, v) {
                    if seen_errors.insert(rule.id.clone()) {
                        run.errors.push((rule.id.clone(), e));
                    }
                    continue;
                }
                before.entry(a.target.clone()).or_insert(old);
            }
        }
        let changed: Vec<String> = before
            .into_iter()
            .filter(|(k, old)| bindings.get(k) != *old)
            .map(|(k, _)| k)
            .collect();
        if changed.is_empty() {
            return Ok(run);
        }
        if run.iterations >= max_iterations {
            return Err(NonConvergence {
                iterations: run.iterations,
                variables: changed,
            });
        }
    }
}

/// SHA-256 digest of a snapshot's bindings.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContentHash(pub [u8; 32]);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &hex::encode(self.0)[..12])
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(ContentHash(out))
    }
}

/// Frozen view of every binding at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSnapshot {
    at: u64,
    bindings: Arc<BTreeMap<String, Value>>,
    hash: ContentHash,
}

impl ContextSnapshot {
    pub fn from_bindings(at: u64, bindings: BTreeMap<String, Value>) -> Self {
        let mut hasher = Sha256::new();
        let mut buf = Vec::with_capacity(32);
        for (k, v) in &bindings {
            buf.clear();
            buf.extend_from_slice(&(k.len() as u64).to_be_bytes());
            buf.extend_from_slice(k.as_bytes());
            v.encode_into(&mut buf);
            hasher.update(&buf);
        }
        ContextSnapshot {
            at,
            bindings: Arc::new(bindings),
            hash: ContentHash(hasher.finalize().into()),
        }
    }

    pub fn at(&self) -> u64 {
        self.at
    }

    pub fn bindings(&self) -> &BTreeMap<String, Value> {
        &self.bindings
    }

    pub fn content_hash(&self) -> ContentHash {
        self.hash
    }
}

impl Bindings for ContextSnapshot {
    fn get(&self, name: &str) -> Option<Value> {
        self.bindings.get(name).cloned()
    }
}

/// Captures the union of internal and external bindings at `now`.
pub fn snapshot(ic: &InternalContext, ec: &ExternalContext, now: u64) -> ContextSnapshot {
    let mut b = ec.env.clone();
    for (k, q) in &ic.resources {
        b.insert(k.clone(), Value::Num(*q));
    }
    for (k, v) in &ic.state {
        b.insert(k.clone(), v.clone());
    }
    ContextSnapshot::from_bindings(now, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingChange {
    pub variable: String,
    pub old: Value,
    pub new: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("snapshots have different variable sets")]
pub struct SchemaMismatch;

/// Bindings that differ between two snapshots of the same schema, sorted by name.
pub fn diff(a: &ContextSnapshot, b: &ContextSnapshot) -> Result<Vec<BindingChange>, SchemaMismatch> {
    if a.bindings.len() != b.bindings.len() || !a.bindings.keys().eq(b.bindings.keys()) {
        return Err(SchemaMismatch);
    }
    Ok(a.bindings
        .iter()
        .zip(b.bindings.values())
        .filter(|((_, x), y)| x != y)
        .map(|((k, x), y)| BindingChange {
            variable: k.clone(),
            old: x.clone(),
            new: y.clone(),
        })
        .collect())
}
