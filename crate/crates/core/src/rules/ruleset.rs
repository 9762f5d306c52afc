use std::cmp::Ordering;

use thiserror::Error;

use super::ast::{Rule, RuleKind};
use super::eval::{eval_condition, Bindings, EvalError, TraceView};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleSetError {
    #[error("duplicate rule id '{0}'")]
    DuplicateId(String),
    #[error("unknown rule id '{0}'")]
    UnknownId(String),
    #[error("rule '{new}' would be a second enabled goal rule (already have '{existing}')")]
    SecondGoal { existing: String, new: String },
}

/// Ordered, revisioned collection of rules.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleSet {
    rules: Vec<Rule>,
    revision: u64,
}

/// Total rule order: descending priority, then ascending id.
pub fn rank_order(a: &Rule, b: &Rule) -> Ordering {
    b.priority.cmp(&a.priority).then_with(|| a.id.cmp(&b.id))
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<Rule>) -> Result<Self, RuleSetError> {
        let mut rs = RuleSet::new();
        for r in rules {
            rs.add(r)?;
        }
        rs.revision = 0;
        Ok(rs)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    fn position(&self, id: &str) -> Result<usize, RuleSetError> {
        self.rules
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| RuleSetError::UnknownId(id.to_owned()))
    }

    /// The enabled goal rule, if any.
    pub fn goal(&self) -> Option<&Rule> {
        self.rules.iter().find(|r| r.enabled && r.kind() == RuleKind::Goal)
    }

    fn check_goal(&self, candidate: &Rule, replacing: Option<&str>) -> Result<(), RuleSetError> {
        if !(candidate.enabled && candidate.kind() == RuleKind::Goal) {
            return Ok(());
        }
        match self.goal() {
            Some(g) if Some(g.id.as_str()) != replacing => Err(RuleSetError::SecondGoal {
                existing: g.id.clone(),
                new: candidate.id.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn add(&mut self, rule: Rule) -> Result<(), RuleSetError> {
        if self.get(&rule.id).is_some() {
            return Err(RuleSetError::DuplicateId(rule.id));
        }
        self.check_goal(&rule, None)?;
        self.rules.push(rule);
        self.revision += 1;
        Ok(())
    }

    /// Replaces the rule with id `id` in place.
    pub fn replace(&mut self, id: &str, rule: Rule) -> Result<(), RuleSetError> {
        let at = self.position(id)?;
        if rule.id != id && self.get(&rule.id).is_some() {
            return Err(RuleSetError::DuplicateId(rule.id));
        }
        self.check_goal(&rule, Some(id))?;
        self.rules[at] = rule;
        self.revision += 1;
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<Rule, RuleSetError> {
        let at = self.position(id)?;
        self.revision += 1;
        Ok(self.rules.remove(at))
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> Result<(), RuleSetError> {
        let at = self.position(id)?;
        if enabled {
            let mut probe = self.rules[at].clone();
            probe.enabled = true;
            self.check_goal(&probe, Some(id))?;
        }
        self.rules[at].enabled = enabled;
        self.revision += 1;
        Ok(())
    }

    /// Enabled rules of `kind` in rank order, regardless of their conditions.
    pub fn ranked(&self, kind: RuleKind) -> Vec<&Rule> {
        let mut v: Vec<&Rule> = self.rules.iter().filter(|r| r.enabled && r.kind() == kind).collect();
        v.sort_by(|a, b| rank_order(a, b));
        v
    }
}

/// Result of matching one rule kind against a context.
#[derive(Debug, Clone, Default)]
pub struct Applicable<'a> {
    pub rules: Vec<&'a Rule>,
    /// Rules whose condition could not be evaluated; they count as not applicable.
    pub errors: Vec<(String, EvalError)>,
}

/// Enabled rules of `kind` whose condition holds, ordered by (-priority, id).
pub fn applicable_rules<'a>(
    rules: &'a RuleSet,
    kind: RuleKind,
    bindings: &dyn Bindings,
    trace: &dyn TraceView,
) -> Applicable<'a> {
    let mut out = Applicable::default();
    for rule in rules.ranked(kind) {
        match eval_condition(&rule.condition, bindings, trace) {
            Ok(true) => out.rules.push(rule),
            Ok(false) => {}
            Err(e) => out.errors.push((rule.id.clone(), e)),
        }
    }
    out
}
