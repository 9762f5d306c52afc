//! Activities, candidate computation, selection and execution.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContentHash, ContextSnapshot, InternalContext};
use crate::history::{PracticeVeto, VetoDecision};
use crate::rng::SimRng;
use crate::rules::{
    applicable_rules, eval_condition, eval_expr, parse_expr_in, Bindings, EvalError, Expr, RuleKind, RuleSet,
    TraceView, Ty,
};
use crate::schema::{Namespace, Schema};
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationSpec {
    Fixed(u64),
    /// Integer drawn uniformly from `[lo, hi]`.
    Uniform([u64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub target: String,
    pub expr: String,
}

/// An activity as written in scenario files and `defineActivity` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ActivitySpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub duration: DurationSpec,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub consumes: BTreeMap<String, String>,
    #[serde(default)]
    pub produces: BTreeMap<String, String>,
    #[serde(default)]
    pub effects: Vec<EffectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precondition: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub target: String,
    pub value: Expr,
}

/// A validated activity with parsed expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub id: String,
    pub name: String,
    pub duration: DurationSpec,
    pub cost: f64,
    pub consumes: BTreeMap<String, Expr>,
    pub produces: BTreeMap<String, Expr>,
    pub effects: Vec<Effect>,
    pub precondition: Option<Expr>,
    pub spec: ActivitySpec,
}

/// A problem in an activity definition; `field` is a path relative to the activity.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ActivityError {
    pub field: String,
    pub message: String,
}

fn typed_expr(src: &str, schema: &Schema, want: ValueType, field: String) -> Result<Expr, ActivityError> {
    let (expr, ty) = parse_expr_in(src, schema).map_err(|e| ActivityError {
        field: field.clone(),
        message: e.to_string(),
    })?;
    if ty != Ty::Known(want) {
        return Err(ActivityError {
            field,
            message: format!("expected a {want} expression"),
        });
    }
    Ok(expr)
}

impl Activity {
    /// Parses and type-checks `spec` against `schema`.
    pub fn compile(spec: &ActivitySpec, schema: &Schema) -> Result<Activity, Vec<ActivityError>> {
        let mut errs = Vec::new();
        let err = |field: &str, message: String| ActivityError {
            field: field.to_owned(),
            message,
        };
        if crate::rules::is_reserved(&spec.id) || !is_identifier(&spec.id) {
            errs.push(err("id", format!("'{}' is not a valid activity id", spec.id)));
        }
        match spec.duration {
            DurationSpec::Uniform([lo, hi]) if lo > hi => {
                errs.push(err("duration", format!("empty range [{lo}, {hi}]")))
            }
            _ => {}
        }
        if !spec.cost.is_finite() || spec.cost < 0.0 {
            errs.push(err("cost", "cost must be a finite non-negative number".into()));
        }
        let mut amounts = |map: &BTreeMap<String, String>, key: &str| {
            let mut out = BTreeMap::new();
            for (res, src) in map {
                let field = format!("{key}/{res}");
                if schema.namespace(res) != Some(Namespace::Resource) {
                    errs.push(err(&field, format!("'{res}' is not a declared resource")));
                    continue;
                }
                match typed_expr(src, schema, ValueType::Num, field) {
                    Ok(e) => {
                        out.insert(res.clone(), e);
                    }
                    Err(e) => errs.push(e),
                }
            }
            out
        };
        let consumes = amounts(&spec.consumes, "consumes");
        let produces = amounts(&spec.produces, "produces");
        let mut effects = Vec::new();
        for (i, eff) in spec.effects.iter().enumerate() {
            let field = format!("effects/{i}");
            let Some(ty) = schema.state.get(&eff.target) else {
                errs.push(err(
                    &field,
                    format!("'{}' is not a declared state variable", eff.target),
                ));
                continue;
            };
            match typed_expr(&eff.expr, schema, *ty, field) {
                Ok(value) => effects.push(Effect {
                    target: eff.target.clone(),
                    value,
                }),
                Err(e) => errs.push(e),
            }
        }
        let precondition = spec.precondition.as_ref().and_then(|src| {
            typed_expr(src, schema, ValueType::Bool, "precondition".into())
                .map_err(|e| errs.push(e))
                .ok()
        });
        if !errs.is_empty() {
            return Err(errs);
        }
        Ok(Activity {
            id: spec.id.clone(),
            name: spec.name.clone().unwrap_or_else(|| spec.id.clone()),
            duration: spec.duration,
            cost: spec.cost,
            consumes,
            produces,
            effects,
            precondition,
            spec: spec.clone(),
        })
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionRecord {
    /// 1-based step index within the instance.
    pub step: u64,
    pub activity_id: String,
    pub start_time: u64,
    pub end_time: u64,
    pub cost: f64,
    pub snapshot_before: ContentHash,
    pub snapshot_after: ContentHash,
    pub fired_rule_id: String,
    pub consumed: BTreeMap<String, f64>,
    pub produced: BTreeMap<String, f64>,
}

/// Incrementally maintained view of the current trace for built-in functions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceIndex {
    counts: HashMap<String, usize>,
    sequence: Vec<String>,
    clock: u64,
}

impl TraceIndex {
    pub fn push(&mut self, activity: &str) {
        *self.counts.entry(activity.to_owned()).or_default() += 1;
        self.sequence.push(activity.to_owned());
    }

    pub fn set_clock(&mut self, clock: u64) {
        self.clock = clock;
    }

    pub fn sequence(&self) -> &[String] {
        &self.sequence
    }
}

impl TraceView for TraceIndex {
    fn executed_count(&self, activity: &str) -> usize {
        self.counts.get(activity).copied().unwrap_or(0)
    }
    fn elapsed(&self) -> u64 {
        self.clock
    }
    fn last_executed(&self) -> Option<&str> {
        self.sequence.last().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Candidate {
    pub activity_id: String,
    pub rule_id: String,
    pub priority: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "reason")]
pub enum RejectReason {
    UnknownActivity,
    PreconditionFalse,
    InsufficientResources {
        resource: String,
        needed: f64,
        available: f64,
    },
    EvaluationFailed {
        message: String,
    },
    VetoRule {
        rule_id: String,
    },
    BadPractice {
        instance_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rejection {
    pub activity_id: String,
    pub rule_id: String,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateReport {
    /// Runnable candidates in rank order, one per activity.
    pub accepted: Vec<Candidate>,
    pub rejected: Vec<Rejection>,
    /// Rules skipped because their condition failed to evaluate.
    pub rule_errors: Vec<(String, EvalError)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("insufficient '{resource}': need {needed}, have {available}")]
    InsufficientResources {
        resource: String,
        needed: f64,
        available: f64,
    },
    #[error("precondition of '{0}' does not hold")]
    PreconditionFalse(String),
    #[error("{field}: {source}")]
    Effect {
        field: String,
        #[source]
        source: EvalError,
    },
    #[error("{field}: amount {amount} is negative")]
    NegativeAmount { field: String, amount: f64 },
}

type Amounts = (BTreeMap<String, f64>, BTreeMap<String, f64>);

fn eval_amounts(activity: &Activity, bindings: &dyn Bindings, trace: &dyn TraceView) -> Result<Amounts, ExecError> {
    let eval = |map: &BTreeMap<String, Expr>, key: &str| -> Result<BTreeMap<String, f64>, ExecError> {
        let mut out = BTreeMap::new();
        for (res, e) in map {
            let field = format!("{key}/{res}");
            let v = eval_expr(e, bindings, trace).map_err(|source| ExecError::Effect {
                field: field.clone(),
                source,
            })?;
            let amount = v.as_num().ok_or_else(|| ExecError::Effect {
                field: field.clone(),
                source: EvalError::Type(format!("amount is {}", v.value_type())),
            })?;
            if amount.is_nan() || amount < 0.0 {
                return Err(ExecError::NegativeAmount { field, amount });
            }
            out.insert(res.clone(), amount);
        }
        Ok(out)
    };
    Ok((
        eval(&activity.consumes, "consumes")?,
        eval(&activity.produces, "produces")?,
    ))
}

/// Checks precondition and resource availability against `snap`.
pub fn check_runnable(
    activity: &Activity,
    snap: &ContextSnapshot,
    trace: &dyn TraceView,
) -> Result<Amounts, ExecError> {
    if let Some(pre) = &activity.precondition {
        match eval_condition(pre, snap, trace) {
            Ok(true) => {}
            Ok(false) => return Err(ExecError::PreconditionFalse(activity.id.clone())),
            Err(source) => {
                return Err(ExecError::Effect {
                    field: "precondition".into(),
                    source,
                })
            }
        }
    }
    let amounts = eval_amounts(activity, snap, trace)?;
    for (res, needed) in &amounts.0 {
        let available = snap.bindings().get(res).and_then(Value::as_num).unwrap_or(0.0);
        if available < *needed {
            return Err(ExecError::InsufficientResources {
                resource: res.clone(),
                needed: *needed,
                available,
            });
        }
    }
    Ok(amounts)
}

/// Candidate activities for the current instant.
///
/// Applicable selection rules are mapped to their activities (first, i.e.
/// highest-ranked, rule wins per activity), then filtered by runnability,
/// applicable veto rules, and the historical bad-practice veto.
pub fn candidates(
    rules: &RuleSet,
    catalog: &BTreeMap<String, Activity>,
    snap: &ContextSnapshot,
    trace: &dyn TraceView,
    current: &[String],
    history: &dyn PracticeVeto,
) -> CandidateReport {
    let mut report = CandidateReport::default();
    let selection = applicable_rules(rules, RuleKind::Selection, snap, trace);
    report.rule_errors.extend(selection.errors);
    let vetoes = applicable_rules(rules, RuleKind::Veto, snap, trace);
    report.rule_errors.extend(vetoes.errors);

    let mut seen: Vec<&str> = Vec::new();
    for rule in selection.rules {
        let Some(target) = rule.target_activity() else {
            continue;
        };
        if seen.contains(&target) {
            continue;
        }
        seen.push(target);
        let reject = |reason| Rejection {
            activity_id: target.to_owned(),
            rule_id: rule.id.clone(),
            reason,
        };
        let Some(activity) = catalog.get(target) else {
            report.rejected.push(reject(RejectReason::UnknownActivity));
            continue;
        };
        match check_runnable(activity, snap, trace) {
            Ok(_) => {}
            Err(ExecError::PreconditionFalse(_)) => {
                report.rejected.push(reject(RejectReason::PreconditionFalse));
                continue;
            }
            Err(ExecError::InsufficientResources {
                resource,
                needed,
                available,
            }) => {
                report.rejected.push(reject(RejectReason::InsufficientResources {
                    resource,
                    needed,
                    available,
                }));
                continue;
            }
            Err(e) => {
                report
                    .rejected
                    .push(reject(RejectReason::EvaluationFailed { message: e.to_string() }));
                continue;
            }
        }
        if let Some(v) = vetoes.rules.iter().find(|v| v.target_activity() == Some(target)) {
            report
                .rejected
                .push(reject(RejectReason::VetoRule { rule_id: v.id.clone() }));
            continue;
        }
        if let VetoDecision::Vetoed { instance_id } = history.veto_check(current, target) {
            report.rejected.push(reject(RejectReason::BadPractice { instance_id }));
            continue;
        }
        report.accepted.push(Candidate {
            activity_id: target.to_owned(),
            rule_id: rule.id.clone(),
            priority: rule.priority,
        });
    }
    report
}

/// Head of the ranked candidate list.
pub fn select(cands: &[Candidate]) -> Option<&Candidate> {
    cands.first()
}

/// Outcome of a committed execution; `internal` replaces the caller's context.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub record: ExecutionRecord,
    pub internal: InternalContext,
    pub after: ContextSnapshot,
}

/// Runs `activity` atomically.
///
/// Consumption is applied before production, then effects in listed order,
/// each effect seeing the previous ones. The duration is drawn only once
/// everything has evaluated, so a failed execution consumes no randomness.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    activity: &Activity,
    internal: &InternalContext,
    snap: &ContextSnapshot,
    trace: &dyn TraceView,
    rng: &mut SimRng,
    step: u64,
    fired_rule_id: &str,
) -> Result<Execution, ExecError> {
    let (consumed, produced) = check_runnable(activity, snap, trace)?;
    let mut next = internal.clone();
    let mut working = snap.bindings().clone();
    for (res, q) in &consumed {
        let slot = next.resources.entry(res.clone()).or_insert(0.0);
        *slot -= q;
        working.insert(res.clone(), Value::Num(*slot));
    }
    for (res, q) in &produced {
        let slot = next.resources.entry(res.clone()).or_insert(0.0);
        *slot += q;
        working.insert(res.clone(), Value::Num(*slot));
    }
    for (i, eff) in activity.effects.iter().enumerate() {
        let v = eval_expr(&eff.value, &working, trace).map_err(|source| ExecError::Effect {
            field: format!("effects/{i}"),
            source,
        })?;
        if let Some(old) = next.state.get(&eff.target) {
            if old.value_type() != v.value_type() {
                return Err(ExecError::Effect {
                    field: format!("effects/{i}"),
                    source: EvalError::Type(format!(
                        "cannot assign {} to '{}' of type {}",
                        v.value_type(),
                        eff.target,
                        old.value_type()
                    )),
                });
            }
        }
        next.state.insert(eff.target.clone(), v.clone());
        working.insert(eff.target.clone(), v);
    }
    let duration = match activity.duration {
        DurationSpec::Fixed(d) => d,
        DurationSpec::Uniform([lo, hi]) => rng.uniform_inclusive(lo, hi),
    };
    let start = snap.at();
    let end = start + duration;
    let after = ContextSnapshot::from_bindings(end, working);
    Ok(Execution {
        record: ExecutionRecord {
            step,
            activity_id: activity.id.clone(),
            start_time: start,
            end_time: end,
            cost: activity.cost,
            snapshot_before: snap.content_hash(),
            snapshot_after: after.content_hash(),
            fired_rule_id: fired_rule_id.to_owned(),
            consumed,
            produced,
        },
        internal: next,
        after,
    })
}
