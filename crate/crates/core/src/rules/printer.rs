use std::fmt::{self, Write};

use super::ast::*;
use crate::value::Value;

const NOT_PREC: u8 = 3;
const NEG_PREC: u8 = 7;
const ATOM_PREC: u8 = 8;

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Binary(op, _, _) => op.precedence(),
        Expr::Unary(UnaryOp::Not, _) => NOT_PREC,
        Expr::Unary(UnaryOp::Neg, _) => NEG_PREC,
        Expr::Lit(Value::Num(n)) if n.is_sign_negative() => NEG_PREC,
        _ => ATOM_PREC,
    }
}

fn write_str_lit(out: &mut impl Write, s: &str) -> fmt::Result {
    out.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => out.write_str("\\\"")?,
            '\\' => out.write_str("\\\\")?,
            '\n' => out.write_str("\\n")?,
            '\t' => out.write_str("\\t")?,
            c => out.write_char(c)?,
        }
    }
    out.write_char('"')
}

fn write_child(out: &mut impl Write, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(out, "({e})")
    } else {
        write!(out, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(Value::Bool(b)) => write!(f, "{b}"),
            Expr::Lit(Value::Num(n)) => write!(f, "{n}"),
            Expr::Lit(Value::Str(s)) => write_str_lit(f, s),
            Expr::Var(v) => f.write_str(v),
            Expr::Call(Builtin::ExecutedCount(a)) => write!(f, "executedCount({a})"),
            Expr::Call(Builtin::Elapsed) => f.write_str("elapsed()"),
            Expr::Call(Builtin::LastExecuted) => f.write_str("lastExecuted()"),
            Expr::Unary(UnaryOp::Not, e) => {
                f.write_str("not ")?;
                write_child(f, e, prec(e) < NOT_PREC)
            }
            Expr::Unary(UnaryOp::Neg, e) => {
                f.write_str("-")?;
                write_child(f, e, prec(e) < NEG_PREC)
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                write_child(f, l, prec(l) < p)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, r, prec(r) <= p)
            }
        }
    }
}

impl fmt::Display for Rule {
    /// Canonical source form; priority is always written out.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule {} priority {}", self.id, self.priority)?;
        if let RuleAction::Goal(progress) = &self.action {
            write!(f, " goal when {}", self.condition)?;
            if let Some(p) = progress {
                let dir = match p.direction {
                    Direction::Maximize => "maximize",
                    Direction::Minimize => "minimize",
                };
                write!(f, " progress {} {dir}", p.expr)?;
            }
            return Ok(());
        }
        write!(f, " when {} ", self.condition)?;
        match &self.action {
            RuleAction::Select(a) => write!(f, "select {a}"),
            RuleAction::Forbid(a) => write!(f, "forbid {a}"),
            RuleAction::Assign(assigns) => {
                f.write_str("set ")?;
                for (i, a) in assigns.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{} := {}", a.target, a.value)?;
                }
                Ok(())
            }
            RuleAction::Goal(_) => unreachable!(),
        }
    }
}

pub fn print_rule(rule: &Rule) -> String {
    rule.to_string()
}
