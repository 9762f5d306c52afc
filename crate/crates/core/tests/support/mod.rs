//! Test-side oracles, written without reference to the engine's own code.
//!
//! Shared by the core property tests and the workspace acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dbpsim_core::Value;
use proptest::prelude::*;

pub const NUM_VARS: [&str; 4] = ["n0", "n1", "n2", "n3"];
pub const BOOL_VARS: [&str; 3] = ["b0", "b1", "b2"];
pub const ACTIVITIES: [&str; 4] = ["A0", "A1", "A2", "A3"];

/// Numeric literals that print and re-parse exactly.
const LITERALS: [f64; 7] = [0.0, 1.0, 2.5, 3.0, 10.0, 0.125, 42.0];

#[derive(Debug, Clone)]
pub enum NumE {
    Lit(f64),
    Var(usize),
    Neg(Box<NumE>),
    Bin(char, Box<NumE>, Box<NumE>),
}

#[derive(Debug, Clone)]
pub enum BoolE {
    Lit(bool),
    Var(usize),
    Not(Box<BoolE>),
    And(Box<BoolE>, Box<BoolE>),
    Or(Box<BoolE>, Box<BoolE>),
    Cmp(&'static str, NumE, NumE),
    BoolEq(bool, Box<BoolE>, Box<BoolE>),
}

pub fn num_expr() -> impl Strategy<Value = NumE> {
    let leaf = prop_oneof![
        prop::sample::select(LITERALS.to_vec()).prop_map(NumE::Lit),
        (0..NUM_VARS.len()).prop_map(NumE::Var),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| NumE::Neg(Box::new(e))),
            (prop::sample::select(vec!['+', '-', '*', '/']), inner.clone(), inner).prop_map(|(op, a, b)| NumE::Bin(
                op,
                Box::new(a),
                Box::new(b)
            )),
        ]
    })
}

pub fn bool_expr() -> impl Strategy<Value = BoolE> {
    let cmp = (
        prop::sample::select(vec!["<", "<=", ">", ">=", "==", "!="]),
        num_expr(),
        num_expr(),
    )
        .prop_map(|(op, a, b)| BoolE::Cmp(op, a, b));
    let leaf = prop_oneof![
        any::<bool>().prop_map(BoolE::Lit),
        (0..BOOL_VARS.len()).prop_map(BoolE::Var),
        cmp,
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| BoolE::Not(Box::new(e))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| BoolE::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| BoolE::Or(Box::new(a), Box::new(b))),
            (any::<bool>(), inner.clone(), inner).prop_map(|(ne, a, b)| BoolE::BoolEq(ne, Box::new(a), Box::new(b))),
        ]
    })
}

// Sources are fully parenthesised so the text does not depend on the
// library's precedence table.
impl NumE {
    pub fn source(&self) -> String {
        match self {
            NumE::Lit(v) => format!("{v}"),
            NumE::Var(i) => NUM_VARS[*i].to_owned(),
            NumE::Neg(e) => format!("-({})", e.source()),
            NumE::Bin(op, a, b) => format!("({} {op} {})", a.source(), b.source()),
        }
    }

    /// `None` on division by zero.
    pub fn eval(&self, env: &Env) -> Option<f64> {
        Some(match self {
            NumE::Lit(v) => *v,
            NumE::Var(i) => env.nums[*i],
            NumE::Neg(e) => -e.eval(env)?,
            NumE::Bin(op, a, b) => {
                let (x, y) = (a.eval(env)?, b.eval(env)?);
                match op {
                    '+' => x + y,
                    '-' => x - y,
                    '*' => x * y,
                    _ if y == 0.0 => return None,
                    _ => x / y,
                }
            }
        })
    }
}

impl BoolE {
    pub fn source(&self) -> String {
        match self {
            BoolE::Lit(b) => b.to_string(),
            BoolE::Var(i) => BOOL_VARS[*i].to_owned(),
            BoolE::Not(e) => format!("(not ({}))", e.source()),
            BoolE::And(a, b) => format!("({} and {})", a.source(), b.source()),
            BoolE::Or(a, b) => format!("({} or {})", a.source(), b.source()),
            BoolE::Cmp(op, a, b) => format!("({} {op} {})", a.source(), b.source()),
            BoolE::BoolEq(ne, a, b) => {
                format!("({} {} {})", a.source(), if *ne { "!=" } else { "==" }, b.source())
            }
        }
    }

    /// `None` when evaluation fails; `and`/`or` stop at a decisive left side.
    pub fn eval(&self, env: &Env) -> Option<bool> {
        Some(match self {
            BoolE::Lit(b) => *b,
            BoolE::Var(i) => env.bools[*i],
            BoolE::Not(e) => !e.eval(env)?,
            BoolE::And(a, b) => a.eval(env)? && b.eval(env)?,
            BoolE::Or(a, b) => a.eval(env)? || b.eval(env)?,
            BoolE::Cmp(op, a, b) => {
                let (x, y) = (a.eval(env)?, b.eval(env)?);
                match *op {
                    "<" => x < y,
                    "<=" => x <= y,
                    ">" => x > y,
                    ">=" => x >= y,
                    "==" => x == y,
                    _ => x != y,
                }
            }
            BoolE::BoolEq(ne, a, b) => (a.eval(env)? == b.eval(env)?) != *ne,
        })
    }
}

/// A snapshot over the fixed oracle variables.
#[derive(Debug, Clone)]
pub struct Env {
    pub nums: [f64; 4],
    pub bools: [bool; 3],
}

pub fn env() -> impl Strategy<Value = Env> {
    (
        prop::array::uniform4(prop::sample::select(vec![0.0, 1.0, 2.0, 2.5, 3.0, -1.0, 10.0, 100.0])),
        prop::array::uniform3(any::<bool>()),
    )
        .prop_map(|(nums, bools)| Env { nums, bools })
}

impl Env {
    pub fn bindings(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        for (i, n) in NUM_VARS.iter().enumerate() {
            m.insert(n.to_string(), Value::Num(self.nums[i]));
        }
        for (i, n) in BOOL_VARS.iter().enumerate() {
            m.insert(n.to_string(), Value::Bool(self.bools[i]));
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct OracleRule {
    pub id: String,
    pub priority: i64,
    pub forbid: bool,
    pub activity: usize,
    pub condition: BoolE,
}

impl OracleRule {
    pub fn source(&self) -> String {
        format!(
            "rule {} priority {} when {} {} {}",
            self.id,
            self.priority,
            self.condition.source(),
            if self.forbid { "forbid" } else { "select" },
            ACTIVITIES[self.activity]
        )
    }
}

pub fn rule_set() -> impl Strategy<Value = Vec<OracleRule>> {
    prop::collection::vec(
        (-3i64..=3, prop::bool::weighted(0.25), 0..ACTIVITIES.len(), bool_expr()),
        1..8,
    )
    .prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (priority, forbid, activity, condition))| OracleRule {
                id: format!("r{i}"),
                priority,
                forbid,
                activity,
                condition,
            })
            .collect()
    })
}

/// Ids of rules of one kind whose condition holds, in (-priority, id) order,
/// plus ids of rules whose condition failed to evaluate.
pub fn oracle_applicable(rules: &[OracleRule], forbid: bool, env: &Env) -> (Vec<String>, Vec<String>) {
    let mut hits: Vec<&OracleRule> = Vec::new();
    let mut errors = Vec::new();
    for r in rules.iter().filter(|r| r.forbid == forbid) {
        match r.condition.eval(env) {
            Some(true) => hits.push(r),
            Some(false) => {}
            None => errors.push(r.id.clone()),
        }
    }
    hits.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.id.cmp(&b.id)));
    errors.sort();
    (hits.into_iter().map(|r| r.id.clone()).collect(), errors)
}

/// A rule text whose canonical rendering is exercised by the round-trip test.
pub fn rule_source() -> impl Strategy<Value = String> {
    let condition = bool_expr().prop_map(|e| e.source());
    let action = prop_oneof![
        (0..ACTIVITIES.len()).prop_map(|a| format!("select {}", ACTIVITIES[a])),
        (0..ACTIVITIES.len()).prop_map(|a| format!("forbid {}", ACTIVITIES[a])),
        prop::collection::vec(
            prop_oneof![
                (0..NUM_VARS.len(), num_expr()).prop_map(|(v, e)| format!("{} := {}", NUM_VARS[v], e.source())),
                (0..BOOL_VARS.len(), bool_expr()).prop_map(|(v, e)| format!("{} := {}", BOOL_VARS[v], e.source())),
            ],
            1..3
        )
        .prop_map(|a| format!("set {}", a.join(", "))),
        Just("goal".to_owned()),
        (num_expr(), any::<bool>()).prop_map(|(e, max)| format!(
            "goal progress {} {}",
            e.source(),
            if max { "maximize" } else { "minimize" }
        )),
    ];
    (0u32..1000, prop::option::of(-50i64..50), condition, action).prop_map(|(id, prio, cond, action)| {
        let prio = prio.map(|p| format!(" priority {p}")).unwrap_or_default();
        format!("rule r{id}{prio} when {cond} {action}")
    })
}

/// Ways to break a valid single-line rule, and where the error must be
/// reported if that is knowable (1-based column).
#[derive(Debug, Clone, Copy)]
pub enum Mutation {
    StrayCharAfterWhen,
    DanglingAnd,
    MisspelledWhen,
    UnknownAction,
    MissingActivity,
    UnclosedParen,
}

pub fn mutation() -> impl Strategy<Value = Mutation> {
    prop::sample::select(vec![
        Mutation::StrayCharAfterWhen,
        Mutation::DanglingAnd,
        Mutation::MisspelledWhen,
        Mutation::UnknownAction,
        Mutation::MissingActivity,
        Mutation::UnclosedParen,
    ])
}

/// Applies `m` to a `select`/`forbid` rule, returning the broken text and the
/// expected error column when it is determined by the mutation alone.
pub fn mutate(rule: &OracleRule, m: Mutation) -> (String, Option<u32>) {
    let src = rule.source();
    let when = src.find(" when ").expect("rule has 'when'") + 1;
    let col = |byte: usize| byte as u32 + 1;
    match m {
        Mutation::StrayCharAfterWhen => {
            let at = when + "when ".len();
            (format!("{}# {}", &src[..at], &src[at..]), Some(col(at)))
        }
        Mutation::DanglingAnd => {
            let out = format!("{src} and");
            let at = out.len() - "and".len();
            (out, Some(col(at)))
        }
        Mutation::MisspelledWhen => (format!("{}wen{}", &src[..when], &src[when + 4..]), Some(col(when))),
        Mutation::UnknownAction => {
            let kw = if rule.forbid { " forbid " } else { " select " };
            let at = src.rfind(kw).unwrap() + 1;
            (
                format!("{}launch{}", &src[..at], &src[at + kw.len() - 2..]),
                Some(col(at)),
            )
        }
        Mutation::MissingActivity => {
            let cut = src.rfind(' ').unwrap();
            let out = src[..cut].to_owned();
            let end = out.len();
            (out, Some(col(end)))
        }
        Mutation::UnclosedParen => {
            let at = when + "when ".len();
            (format!("{}({}", &src[..at], &src[at..]), None)
        }
    }
}

/// Context rule `target := source op k` firing when `e0 > threshold`. Sources
/// have lower index than targets so the rule graph is acyclic, and no rule
/// writes e0, so whether a rule fires is fixed.
#[derive(Debug, Clone)]
pub struct DagRule {
    pub priority: i64,
    pub target: usize,
    pub source: usize,
    pub threshold: i32,
    pub add: bool,
    pub k: i32,
}

pub fn dag_rules(vars: usize) -> impl Strategy<Value = Vec<DagRule>> {
    prop::collection::vec(
        (
            -5i64..5,
            1..vars,
            any::<prop::sample::Index>(),
            -5i32..5,
            any::<bool>(),
            -3i32..4,
        ),
        1..10,
    )
    .prop_map(|specs| {
        specs
            .into_iter()
            .map(|(priority, target, s, threshold, add, k)| DagRule {
                priority,
                target,
                source: s.index(target),
                threshold,
                add,
                k,
            })
            .collect()
    })
}

impl DagRule {
    pub fn source(&self, id: usize) -> String {
        format!(
            "rule c{id:02} priority {} when e0 > {} set e{} := e{} {} {}",
            self.priority,
            self.threshold,
            self.target,
            self.source,
            if self.add { "+" } else { "*" },
            self.k
        )
    }
}

/// Passes restated: rules run in rank order seeing earlier writes, until a
/// pass ends where it started. Returns final values and the pass count.
pub fn dag_fixpoint(rules: &[DagRule], init: &[i32; 6]) -> (Vec<f64>, u32) {
    let mut order: Vec<(usize, &DagRule)> = rules.iter().enumerate().collect();
    order.sort_by(|(i, a), (j, b)| b.priority.cmp(&a.priority).then(i.cmp(j)));
    let mut want: Vec<f64> = init.iter().map(|&v| v as f64).collect();
    let mut passes = 0;
    loop {
        passes += 1;
        let start = want.clone();
        for (_, r) in &order {
            if want[0] > r.threshold as f64 {
                want[r.target] = if r.add {
                    want[r.source] + r.k as f64
                } else {
                    want[r.source] * r.k as f64
                };
            }
        }
        if want == start {
            return (want, passes);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActSpec {
    pub consumes: Vec<(usize, u8)>,
    pub produces: Vec<(usize, u8)>,
    pub duration: (u64, u64),
    pub cost: u8,
    pub limit: u8,
    pub priority: i8,
}

pub fn random_scenario() -> impl Strategy<Value = (String, Vec<ActSpec>)> {
    let act = (
        prop::collection::vec((0usize..3, 0u8..6), 0..3),
        prop::collection::vec((0usize..3, 0u8..6), 0..3),
        (1u64..3, 0u64..3),
        0u8..4,
        1u8..6,
        -3i8..4,
    )
        .prop_map(|(consumes, produces, (lo, w), cost, limit, priority)| ActSpec {
            consumes,
            produces,
            duration: (lo, lo + w),
            cost,
            limit,
            priority,
        });
    (prop::array::uniform3(0u8..20), prop::collection::vec(act, 1..5)).prop_map(|(init, acts)| {
        let amounts = |m: &[(usize, u8)]| {
            let map: BTreeMap<String, String> = m.iter().map(|(r, q)| (format!("r{r}"), q.to_string())).collect();
            serde_json::to_value(map).unwrap()
        };
        let activities: Vec<serde_json::Value> = acts
            .iter()
            .enumerate()
            .map(|(i, a)| {
                serde_json::json!({
                    "id": format!("A{i}"),
                    "duration": {"uniform": [a.duration.0, a.duration.1]},
                    "cost": a.cost,
                    "consumes": amounts(&a.consumes),
                    "produces": amounts(&a.produces),
                })
            })
            .collect();
        let mut rules: Vec<String> = acts
            .iter()
            .enumerate()
            .map(|(i, a)| format!("rule s{i} priority {} when executedCount(A{i}) < {} select A{i}", a.priority, a.limit))
            .collect();
        rules.push("rule g goal when elapsed() > 1000".into());
        let json = serde_json::json!({
            "schemaVersion": 1,
            "name": "random",
            "declarations": {
                "resources": (0..3).map(|r| serde_json::json!({"name": format!("r{r}"), "initial": init[r]})).collect::<Vec<_>>(),
            },
            "activities": activities,
            "rules": rules,
        });
        (json.to_string(), acts)
    })
}

/// Independent SplitMix64 seeding followed by xoshiro256**.
pub struct RefRng {
    s: [u64; 4],
}

impl RefRng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        RefRng {
            s: [next(), next(), next(), next()],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }
}
