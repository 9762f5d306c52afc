//! The rule and condition language: grammar, type checker, printer and evaluator.
//!
//! ```text
//! rule   := "rule" ID ["priority" INT] ["goal"] "when" expr action
//! action := "select" ID
//!         | "set" ID ":=" expr {"," ID ":=" expr}
//!         | "forbid" ID
//!         | "goal" ["progress" expr ("maximize" | "minimize")]
//! ```
//!
//! Expression precedence, loosest first: `or`, `and`, `not`, comparisons,
//! `+ -`, `* /`, unary `-`, primaries. Built-ins are `executedCount(Activity)`,
//! `elapsed()` and `lastExecuted()`.

mod ast;
mod eval;
mod lexer;
mod parser;
mod printer;
mod ruleset;

use std::fmt;

pub use ast::*;
pub use eval::{eval_condition, eval_expr, Bindings, EvalError, SequenceTrace, TraceView};
pub use lexer::Pos;
pub use parser::{is_reserved, LenientEnv, Ty, TypeEnv, RESERVED};
pub use printer::print_rule;
pub use ruleset::{applicable_rules, rank_order, Applicable, RuleSet, RuleSetError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    Type,
    UnknownKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub pos: Pos,
    pub message: String,
    pub kind: ParseErrorKind,
}

impl ParseError {
    pub(crate) fn new(pos: Pos, message: impl Into<String>) -> Self {
        ParseError {
            pos,
            message: message.into(),
            kind: ParseErrorKind::Syntax,
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.pos, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Parses a rule without knowledge of a scenario: identifiers are accepted and
/// typed as unknown, but literal type conflicts are still rejected.
pub fn parse_rule(source: &str) -> Result<Rule, ParseError> {
    parse_rule_in(source, &LenientEnv)
}

/// Parses and type-checks a rule against declared variables and activities.
pub fn parse_rule_in(source: &str, env: &dyn TypeEnv) -> Result<Rule, ParseError> {
    parser::Parser::new(source, env)?.parse_rule()
}

/// Parses a standalone expression, returning it with its static type.
pub fn parse_expr_in(source: &str, env: &dyn TypeEnv) -> Result<(Expr, Ty), ParseError> {
    let mut p = parser::Parser::new(source, env)?;
    let out = p.parse_expr()?;
    p.finish()?;
    Ok(out)
}
