use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
        }
    }

    /// Binding strength; higher binds tighter. `not` sits at 3 and unary minus at 7.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq | BinaryOp::Ne => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Builtin {
    /// Number of times the activity occurs in the current instance trace.
    ExecutedCount(String),
    /// Current simulation clock.
    Elapsed,
    /// Id of the most recent activity, or the empty string.
    LastExecuted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Builtin),
}

impl Expr {
    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Expr {
        Expr::Unary(op, Box::new(e))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_owned())
    }

    /// Every variable name referenced, in first-occurrence order.
    pub fn variables(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Var(v) => {
                if !out.contains(&v.as_str()) {
                    out.push(v)
                }
            }
            Expr::Unary(_, e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Lit(_) | Expr::Call(_) => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Selection,
    Context,
    Veto,
    Goal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// True when `new` is strictly better than `old`.
    pub fn improves(self, old: f64, new: f64) -> bool {
        match self {
            Direction::Maximize => new > old,
            Direction::Minimize => new < old,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub target: String,
    pub value: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalProgress {
    pub expr: Expr,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleAction {
    Select(String),
    Assign(Vec<Assignment>),
    Forbid(String),
    Goal(Option<GoalProgress>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: String,
    pub priority: i64,
    pub condition: Expr,
    pub action: RuleAction,
    pub enabled: bool,
}

impl Rule {
    pub fn kind(&self) -> RuleKind {
        match self.action {
            RuleAction::Select(_) => RuleKind::Selection,
            RuleAction::Assign(_) => RuleKind::Context,
            RuleAction::Forbid(_) => RuleKind::Veto,
            RuleAction::Goal(_) => RuleKind::Goal,
        }
    }

    /// Activity named by a selection or veto rule.
    pub fn target_activity(&self) -> Option<&str> {
        match &self.action {
            RuleAction::Select(a) | RuleAction::Forbid(a) => Some(a),
            _ => None,
        }
    }

    pub fn progress(&self) -> Option<&GoalProgress> {
        match &self.action {
            RuleAction::Goal(p) => p.as_ref(),
            _ => None,
        }
    }
}
