use std::collections::{BTreeMap, BTreeSet};

use crate::rules::{Ty, TypeEnv};
use crate::value::ValueType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace {
    Env,
    Resource,
    State,
}

/// Declared variables and activities of a scenario.
///
/// Env vars are written by events and context rules; resources and state
/// vars by activities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    pub env: BTreeMap<String, ValueType>,
    pub resources: BTreeSet<String>,
    pub state: BTreeMap<String, ValueType>,
    pub activities: BTreeSet<String>,
}

impl Schema {
    pub fn namespace(&self, name: &str) -> Option<Namespace> {
        if self.env.contains_key(name) {
            Some(Namespace::Env)
        } else if self.resources.contains(name) {
            Some(Namespace::Resource)
        } else if self.state.contains_key(name) {
            Some(Namespace::State)
        } else {
            None
        }
    }

    pub fn type_of(&self, name: &str) -> Option<ValueType> {
        match self.namespace(name)? {
            Namespace::Env => self.env.get(name).copied(),
            Namespace::Resource => Some(ValueType::Num),
            Namespace::State => self.state.get(name).copied(),
        }
    }
}

impl TypeEnv for Schema {
    fn var_type(&self, name: &str) -> Option<Ty> {
        self.type_of(name).map(Ty::Known)
    }

    fn assignable(&self, name: &str) -> Option<Ty> {
        self.env.get(name).map(|t| Ty::Known(*t))
    }

    fn has_activity(&self, id: &str) -> bool {
        self.activities.contains(id)
    }
}
