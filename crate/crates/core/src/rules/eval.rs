use std::collections::BTreeMap;

use thiserror::Error;

use super::ast::*;
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable '{0}'")]
    Unbound(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("type mismatch: {0}")]
    Type(String),
}

/// Read access to variable bindings.
pub trait Bindings {
    fn get(&self, name: &str) -> Option<Value>;
}

impl Bindings for BTreeMap<String, Value> {
    fn get(&self, name: &str) -> Option<Value> {
        BTreeMap::get(self, name).cloned()
    }
}

/// What the built-in functions may observe about the running instance.
pub trait TraceView {
    fn executed_count(&self, activity: &str) -> usize;
    fn elapsed(&self) -> u64;
    fn last_executed(&self) -> Option<&str>;
}

/// A trace view over a plain activity sequence.
#[derive(Debug, Clone, Default)]
pub struct SequenceTrace {
    pub sequence: Vec<String>,
    pub clock: u64,
}

impl TraceView for SequenceTrace {
    fn executed_count(&self, activity: &str) -> usize {
        self.sequence.iter().filter(|a| *a == activity).count()
    }
    fn elapsed(&self) -> u64 {
        self.clock
    }
    fn last_executed(&self) -> Option<&str> {
        self.sequence.last().map(String::as_str)
    }
}

fn num(v: Value, op: &str) -> Result<f64, EvalError> {
    v.as_num()
        .ok_or_else(|| EvalError::Type(format!("'{op}' expects a number, got {}", v.value_type())))
}

fn boolean(v: Value, op: &str) -> Result<bool, EvalError> {
    v.as_bool()
        .ok_or_else(|| EvalError::Type(format!("'{op}' expects a boolean, got {}", v.value_type())))
}

/// Evaluates `expr`. Pure: reads bindings and trace, mutates nothing.
///
/// `and`/`or` short-circuit left to right.
pub fn eval_expr(expr: &Expr, bindings: &dyn Bindings, trace: &dyn TraceView) -> Result<Value, EvalError> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Var(name) => bindings.get(name).ok_or_else(|| EvalError::Unbound(name.clone())),
        Expr::Call(Builtin::ExecutedCount(a)) => Ok(Value::Num(trace.executed_count(a) as f64)),
        Expr::Call(Builtin::Elapsed) => Ok(Value::Num(trace.elapsed() as f64)),
        Expr::Call(Builtin::LastExecuted) => Ok(Value::Str(trace.last_executed().unwrap_or("").to_owned())),
        Expr::Unary(UnaryOp::Not, e) => Ok(Value::Bool(!boolean(eval_expr(e, bindings, trace)?, "not")?)),
        Expr::Unary(UnaryOp::Neg, e) => Ok(Value::Num(-num(eval_expr(e, bindings, trace)?, "-")?)),
        Expr::Binary(op @ (BinaryOp::And | BinaryOp::Or), l, r) => {
            let lhs = boolean(eval_expr(l, bindings, trace)?, op.symbol())?;
            match (op, lhs) {
                (BinaryOp::And, false) => Ok(Value::Bool(false)),
                (BinaryOp::Or, true) => Ok(Value::Bool(true)),
                _ => Ok(Value::Bool(boolean(eval_expr(r, bindings, trace)?, op.symbol())?)),
            }
        }
        Expr::Binary(op, l, r) => {
            let lhs = eval_expr(l, bindings, trace)?;
            let rhs = eval_expr(r, bindings, trace)?;
            binary(*op, lhs, rhs)
        }
    }
}

fn binary(op: BinaryOp, lhs: Value, rhs: Value) -> Result<Value, EvalError> {
    let sym = op.symbol();
    Ok(match op {
        BinaryOp::Eq | BinaryOp::Ne => {
            if lhs.value_type() != rhs.value_type() {
                return Err(EvalError::Type(format!(
                    "'{sym}' compares {} with {}",
                    lhs.value_type(),
                    rhs.value_type()
                )));
            }
            Value::Bool((lhs == rhs) == (op == BinaryOp::Eq))
        }
        BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => {
            let (a, b) = (num(lhs, sym)?, num(rhs, sym)?);
            Value::Bool(match op {
                BinaryOp::Lt => a < b,
                BinaryOp::Le => a <= b,
                BinaryOp::Gt => a > b,
                _ => a >= b,
            })
        }
        BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => {
            let (a, b) = (num(lhs, sym)?, num(rhs, sym)?);
            Value::Num(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                _ => {
                    if b == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    a / b
                }
            })
        }
        BinaryOp::And | BinaryOp::Or => unreachable!("handled by short-circuit path"),
    })
}

/// Evaluates a condition that must produce a boolean.
pub fn eval_condition(expr: &Expr, bindings: &dyn Bindings, trace: &dyn TraceView) -> Result<bool, EvalError> {
    match eval_expr(expr, bindings, trace)? {
        Value::Bool(b) => Ok(b),
        other => Err(EvalError::Type(format!(
            "condition produced {}, expected {}",
            other.value_type(),
            ValueType::Bool
        ))),
    }
}
