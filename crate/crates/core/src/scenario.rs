//! Scenario files: schema, validation, canonical form and content hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activity::{is_identifier, Activity, ActivitySpec};
use crate::context::{ExternalContext, ExternalEvent, InternalContext, DEFAULT_MAX_CONTEXT_ITERATIONS};
use crate::rng::RNG_ALGORITHM;
use crate::rules::{is_reserved, parse_rule, parse_rule_in, print_rule, RuleSet, RuleSetError};
use crate::schema::Schema;
use crate::storage::canonical_json;
use crate::value::Value;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_STAGNATION_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarDecl {
    pub name: String,
    pub initial: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceDecl {
    pub name: String,
    pub initial: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Declarations {
    #[serde(default)]
    pub env_vars: Vec<VarDecl>,
    #[serde(default)]
    pub resources: Vec<ResourceDecl>,
    #[serde(default)]
    pub state_vars: Vec<VarDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GoalSettings {
    #[serde(default = "default_window")]
    pub stagnation_window: usize,
}

fn default_window() -> usize {
    DEFAULT_STAGNATION_WINDOW
}

impl Default for GoalSettings {
    fn default() -> Self {
        GoalSettings {
            stagnation_window: DEFAULT_STAGNATION_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Defaults {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_context_iterations: u32,
}

fn default_max_iterations() -> u32 {
    DEFAULT_MAX_CONTEXT_ITERATIONS
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            seed: 0,
            max_context_iterations: DEFAULT_MAX_CONTEXT_ITERATIONS,
        }
    }
}

fn default_rng() -> String {
    RNG_ALGORITHM.to_owned()
}

/// On-disk scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_rng")]
    pub rng: String,
    #[serde(default)]
    pub declarations: Declarations,
    #[serde(default)]
    pub activities: Vec<ActivitySpec>,
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub event_schedule: Vec<ExternalEvent>,
    #[serde(default)]
    pub goal: GoalSettings,
    #[serde(default)]
    pub defaults: Defaults,
}

/// One load-time problem, located by a JSON pointer into the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// A validated scenario ready to instantiate sessions from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub hash: String,
    pub schema: Schema,
    pub activities: BTreeMap<String, Activity>,
    pub rules: RuleSet,
    pub internal: InternalContext,
    pub external: ExternalContext,
}

impl Scenario {
    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn stagnation_window(&self) -> usize {
        self.file.goal.stagnation_window
    }

    pub fn default_seed(&self) -> u64 {
        self.file.defaults.seed
    }

    pub fn max_context_iterations(&self) -> u32 {
        self.file.defaults.max_context_iterations
    }
}

fn diag(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and fully validates a scenario document.
pub fn load_scenario(bytes: &[u8]) -> Result<Scenario, ValidationError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let pointer = if path == "." {
            String::new()
        } else {
            pointer_from_path(&path)
        };
        ValidationError {
            diagnostics: vec![diag(pointer, e.into_inner().to_string())],
        }
    })?;
    let hash = hash_file(&file);
    validate(file, hash)
}

/// Converts serde_path_to_error's `a.b[3].c` form into `/a/b/3/c`.
fn pointer_from_path(path: &str) -> String {
    let mut out = String::new();
    for seg in path.split('.') {
        let mut rest = seg;
        while let Some(open) = rest.find('[') {
            if open > 0 {
                out.push('/');
                out.push_str(&rest[..open]);
            }
            let close = rest[open..].find(']').map_or(rest.len(), |c| open + c);
            out.push('/');
            out.push_str(&rest[open + 1..close]);
            rest = rest.get(close + 1..).unwrap_or("");
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

pub fn validate(file: ScenarioFile, hash: String) -> Result<Scenario, ValidationError> {
    let mut errs = Vec::new();
    if file.schema_version != SCENARIO_SCHEMA_VERSION {
        errs.push(diag(
            "/schemaVersion",
            format!(
                "unsupported schema version {} (expected {SCENARIO_SCHEMA_VERSION})",
                file.schema_version
            ),
        ));
    }
    if file.rng != RNG_ALGORITHM {
        errs.push(diag("/rng", format!("unsupported generator '{}'", file.rng)));
    }
    if file.goal.stagnation_window == 0 {
        errs.push(diag("/goal/stagnationWindow", "must be at least 1"));
    }
    if file.defaults.max_context_iterations == 0 {
        errs.push(diag("/defaults/maxContextIterations", "must be at least 1"));
    }

    let mut schema = Schema::default();
    let mut internal = InternalContext::default();
    let mut env = BTreeMap::new();
    let mut names = BTreeSet::new();
    let mut check_name = |path: String, name: &str, errs: &mut Vec<Diagnostic>| -> bool {
        if !is_identifier(name) || is_reserved(name) {
            errs.push(diag(path, format!("'{name}' is not a valid identifier")));
            false
        } else if !names.insert(name.to_owned()) {
            errs.push(diag(path, format!("'{name}' is declared more than once")));
            false
        } else {
            true
        }
    };
    for (i, d) in file.declarations.env_vars.iter().enumerate() {
        if check_name(format!("/declarations/envVars/{i}/name"), &d.name, &mut errs) {
            schema.env.insert(d.name.clone(), d.initial.value_type());
            env.insert(d.name.clone(), d.initial.clone());
        }
    }
    for (i, d) in file.declarations.resources.iter().enumerate() {
        if !check_name(format!("/declarations/resources/{i}/name"), &d.name, &mut errs) {
            continue;
        }
        if !d.initial.is_finite() || d.initial < 0.0 {
            errs.push(diag(
                format!("/declarations/resources/{i}/initial"),
                format!("initial quantity of '{}' must be non-negative", d.name),
            ));
        }
        schema.resources.insert(d.name.clone());
        internal.resources.insert(d.name.clone(), d.initial);
    }
    for (i, d) in file.declarations.state_vars.iter().enumerate() {
        if check_name(format!("/declarations/stateVars/{i}/name"), &d.name, &mut errs) {
            schema.state.insert(d.name.clone(), d.initial.value_type());
            internal.state.insert(d.name.clone(), d.initial.clone());
        }
    }

    for (i, a) in file.activities.iter().enumerate() {
        if !schema.activities.insert(a.id.clone()) {
            errs.push(diag(
                format!("/activities/{i}/id"),
                format!("activity '{}' is declared more than once", a.id),
            ));
        }
    }
    let mut activities = BTreeMap::new();
    for (i, a) in file.activities.iter().enumerate() {
        match Activity::compile(a, &schema) {
            Ok(act) => {
                activities.entry(act.id.clone()).or_insert(act);
            }
            Err(es) => errs.extend(
                es.into_iter()
                    .map(|e| diag(format!("/activities/{i}/{}", e.field), e.message)),
            ),
        }
    }

    let mut rules = RuleSet::new();
    for (i, src) in file.rules.iter().enumerate() {
        let path = format!("/rules/{i}");
        match parse_rule_in(src, &schema) {
            Ok(rule) => {
                let id = rule.id.clone();
                if let Err(e) = rules.add(rule) {
                    let msg = match e {
                        RuleSetError::DuplicateId(_) => format!("duplicate rule id '{id}'"),
                        other => other.to_string(),
                    };
                    errs.push(diag(path, msg));
                }
            }
            Err(e) => {
                let id = src.split_whitespace().nth(1).unwrap_or("?");
                errs.push(diag(path, format!("rule '{id}' at {e}")));
            }
        }
    }
    let rules = RuleSet::from_rules(rules.iter().cloned().collect()).unwrap_or(rules);

    for (i, ev) in file.event_schedule.iter().enumerate() {
        for (var, v) in &ev.assignments {
            let path = format!("/eventSchedule/{i}/assignments/{var}");
            match schema.env.get(var) {
                None => errs.push(diag(path, format!("'{var}' is not a declared environment variable"))),
                Some(t) if *t != v.value_type() => errs.push(diag(
                    path,
                    format!("'{var}' has type {t}, event assigns {}", v.value_type()),
                )),
                _ => {}
            }
        }
    }

    if !errs.is_empty() {
        return Err(ValidationError { diagnostics: errs });
    }
    let external = ExternalContext::new(env, file.event_schedule.clone());
    Ok(Scenario {
        file,
        hash,
        schema,
        activities,
        rules,
        internal,
        external,
    })
}

/// Canonical form: declarations sorted by name, activities by id, rules by
/// their canonical text. The event schedule keeps its order since ties are
/// resolved by declaration order.
pub fn canonicalize(file: &ScenarioFile) -> ScenarioFile {
    let mut c = file.clone();
    c.declarations.env_vars.sort_by(|a, b| a.name.cmp(&b.name));
    c.declarations.resources.sort_by(|a, b| a.name.cmp(&b.name));
    c.declarations.state_vars.sort_by(|a, b| a.name.cmp(&b.name));
    c.activities.sort_by(|a, b| a.id.cmp(&b.id));
    for r in &mut c.rules {
        if let Ok(rule) = parse_rule(r) {
            *r = print_rule(&rule);
        }
    }
    c.rules.sort();
    c
}

fn hash_file(file: &ScenarioFile) -> String {
    hex::encode(Sha256::digest(canonical_json(&canonicalize(file)).as_bytes()))
}

/// Hex SHA-256 of the canonical document; raw bytes are hashed when they do
/// not parse as a scenario.
pub fn scenario_hash(bytes: &[u8]) -> String {
    match serde_json::from_slice::<ScenarioFile>(bytes) {
        Ok(file) => hash_file(&file),
        Err(_) => hex::encode(Sha256::digest(bytes)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"{
      "schemaVersion": 1,
      "name": "mini",
      "declarations": {
        "envVars": [{"name": "go", "initial": true}],
        "resources": [{"name": "stock", "initial": 2}],
        "stateVars": [{"name": "done", "initial": false}]
      },
      "activities": [
        {"id": "Work", "duration": {"fixed": 1}, "cost": 1, "consumes": {"stock": "1"},
         "effects": [{"target": "done", "expr": "stock == 0"}]}
      ],
      "rules": [
        "rule w priority 1 when go select Work",
        "rule g goal when done"
      ],
      "eventSchedule": [{"at": 3, "label": "stop", "assignments": {"go": false}}]
    }"#;

    fn with(f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let mut v: serde_json::Value = serde_json::from_str(MINI).unwrap();
        f(&mut v);
        serde_json::to_vec(&v).unwrap()
    }

    #[test]
    fn loads_and_defaults() {
        let s = load_scenario(MINI.as_bytes()).unwrap();
        assert_eq!(s.activities.len(), 1);
        assert_eq!(s.rules.len(), 2);
        assert_eq!(s.stagnation_window(), 5);
        assert_eq!(s.max_context_iterations(), 100);
        assert_eq!(s.internal.resources["stock"], 2.0);
        assert_eq!(s.hash, scenario_hash(MINI.as_bytes()));
    }

    #[test]
    fn undeclared_identifier_names_rule() {
        let bytes = with(|v| v["rules"][0] = "rule w when stok > 1 select Work".into());
        let err = load_scenario(&bytes).unwrap_err();
        assert_eq!(err.diagnostics.len(), 1);
        assert_eq!(err.diagnostics[0].path, "/rules/0");
        assert!(err.diagnostics[0].message.contains("'w'"));
        assert!(err.diagnostics[0].message.contains("stok"));
    }

    #[test]
    fn duplicate_and_colliding_names() {
        let bytes = with(|v| {
            v["declarations"]["resources"]
                .as_array_mut()
                .unwrap()
                .push(serde_json::json!({"name": "stock", "initial": 1}));
            v["declarations"]["stateVars"]
                .as_array_mut()
                .unwrap()
                .push(serde_json::json!({"name": "go", "initial": 1}));
        });
        let err = load_scenario(&bytes).unwrap_err();
        let paths: Vec<_> = err.diagnostics.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(
            paths,
            ["/declarations/resources/1/name", "/declarations/stateVars/1/name"]
        );
    }

    #[test]
    fn duplicate_rule_id_and_negative_quantity() {
        let bytes = with(|v| {
            v["rules"]
                .as_array_mut()
                .unwrap()
                .push("rule w when true select Work".into());
            v["declarations"]["resources"][0]["initial"] = (-1).into();
        });
        let err = load_scenario(&bytes).unwrap_err();
        let paths: Vec<_> = err.diagnostics.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, ["/declarations/resources/0/initial", "/rules/2"]);
    }

    #[test]
    fn schema_errors_carry_pointer() {
        let bytes = with(|v| v["activities"][0]["duration"] = serde_json::json!({"fixed": "x"}));
        let err = load_scenario(&bytes).unwrap_err();
        assert_eq!(err.diagnostics[0].path, "/activities/0/duration/fixed");
        let bytes = with(|v| v["declarations"]["bogus"] = 1.into());
        let err = load_scenario(&bytes).unwrap_err();
        assert_eq!(err.diagnostics[0].path, "/declarations/bogus");
    }

    #[test]
    fn event_assignments_checked() {
        let bytes = with(|v| v["eventSchedule"][0]["assignments"] = serde_json::json!({"done": true, "go": 1}));
        let err = load_scenario(&bytes).unwrap_err();
        let paths: Vec<_> = err.diagnostics.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(
            paths,
            ["/eventSchedule/0/assignments/done", "/eventSchedule/0/assignments/go"]
        );
    }

    #[test]
    fn hash_ignores_layout_and_order_but_not_content() {
        let compact = with(|_| {});
        assert_eq!(scenario_hash(&compact), scenario_hash(MINI.as_bytes()));
        let respaced = with(|v| v["rules"][0] = "rule   w priority 1\n when go   select Work".into());
        assert_eq!(scenario_hash(&respaced), scenario_hash(MINI.as_bytes()));
        let reordered = with(|v| v["rules"].as_array_mut().unwrap().reverse());
        assert_eq!(scenario_hash(&reordered), scenario_hash(MINI.as_bytes()));
        let changed = with(|v| v["rules"][0] = "rule w priority 2 when go select Work".into());
        assert_ne!(scenario_hash(&changed), scenario_hash(MINI.as_bytes()));
        assert_ne!(scenario_hash(b"{"), scenario_hash(b"{ "));
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(
            pointer_from_path("activities[0].duration.fixed"),
            "/activities/0/duration/fixed"
        );
        assert_eq!(pointer_from_path("rules[2]"), "/rules/2");
        assert_eq!(pointer_from_path("name"), "/name");
    }
}
