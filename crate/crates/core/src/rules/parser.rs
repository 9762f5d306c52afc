//! Recursive-descent parser for rules and expressions.
//!
//! Type checking happens while the tree is built so every type error can be
//! reported at the operator or operand that caused it.

use super::ast::*;
use super::lexer::{tokenize, Pos, Tok, Token};
use super::{ParseError, ParseErrorKind};
use crate::value::{Value, ValueType};

pub const RESERVED: &[&str] = &[
    "rule", "priority", "when", "select", "set", "forbid", "goal", "progress", "maximize", "minimize", "and", "or",
    "not", "true", "false",
];

pub fn is_reserved(word: &str) -> bool {
    RESERVED.contains(&word)
}

/// Static type of an expression. `Any` arises only under a lenient environment
/// where variable types are not known yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Known(ValueType),
    Any,
}

impl Ty {
    fn accepts(self, want: ValueType) -> bool {
        match self {
            Ty::Known(t) => t == want,
            Ty::Any => true,
        }
    }

    fn compatible(self, other: Ty) -> bool {
        match (self, other) {
            (Ty::Known(a), Ty::Known(b)) => a == b,
            _ => true,
        }
    }

    fn describe(self) -> String {
        match self {
            Ty::Known(t) => t.to_string(),
            Ty::Any => "unknown".into(),
        }
    }
}

/// Declarations an expression is checked against.
pub trait TypeEnv {
    /// Type of a readable variable, or `None` when it is not declared.
    fn var_type(&self, name: &str) -> Option<Ty>;
    /// Type of a variable that context rules may assign.
    fn assignable(&self, name: &str) -> Option<Ty>;
    fn has_activity(&self, id: &str) -> bool;
}

/// Accepts any identifier; used when a rule is parsed without a scenario.
pub struct LenientEnv;

impl TypeEnv for LenientEnv {
    fn var_type(&self, _: &str) -> Option<Ty> {
        Some(Ty::Any)
    }
    fn assignable(&self, _: &str) -> Option<Ty> {
        Some(Ty::Any)
    }
    fn has_activity(&self, _: &str) -> bool {
        true
    }
}

pub(crate) struct Parser<'a> {
    toks: Vec<Token>,
    at: usize,
    env: &'a dyn TypeEnv,
}

impl<'a> Parser<'a> {
    pub(crate) fn new(src: &str, env: &'a dyn TypeEnv) -> Result<Self, ParseError> {
        Ok(Parser {
            toks: tokenize(src)?,
            at: 0,
            env,
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.at]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            let t = self.peek();
            Err(ParseError::new(t.pos, format!("expected '{kw}', found {}", t.tok)))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Pos), ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Ident(s) if !is_reserved(&s) => Ok((s, t.pos)),
            Tok::Ident(s) => Err(ParseError::new(t.pos, format!("expected {what}, found keyword '{s}'"))),
            other => Err(ParseError::new(t.pos, format!("expected {what}, found {other}"))),
        }
    }

    fn expect_eof(&mut self) -> Result<(), ParseError> {
        let t = self.peek();
        if t.tok == Tok::Eof {
            Ok(())
        } else {
            Err(ParseError::new(t.pos, format!("unexpected trailing {}", t.tok)))
        }
    }

    pub(crate) fn finish(&mut self) -> Result<(), ParseError> {
        self.expect_eof()
    }

    fn type_err(pos: Pos, msg: String) -> ParseError {
        ParseError {
            pos,
            message: msg,
            kind: ParseErrorKind::Type,
        }
    }

    fn check_activity(&self, id: &str, pos: Pos) -> Result<(), ParseError> {
        if self.env.has_activity(id) {
            Ok(())
        } else {
            Err(Self::type_err(pos, format!("unknown activity '{id}'")))
        }
    }

    pub(crate) fn parse_rule(&mut self) -> Result<Rule, ParseError> {
        self.expect_kw("rule")?;
        let (id, _) = self.expect_ident("rule id")?;
        let mut priority = 0;
        if self.eat_kw("priority") {
            priority = self.parse_int()?;
        }
        let goal_first = self.eat_kw("goal");
        self.expect_kw("when")?;
        let cond_pos = self.peek().pos;
        let (condition, ty) = self.parse_expr()?;
        if !ty.accepts(ValueType::Bool) {
            return Err(Self::type_err(
                cond_pos,
                format!("rule condition must be boolean, found {}", ty.describe()),
            ));
        }
        let action = if goal_first {
            self.parse_goal_tail()?
        } else {
            self.parse_action()?
        };
        self.expect_eof()?;
        Ok(Rule {
            id,
            priority,
            condition,
            action,
            enabled: true,
        })
    }

    fn parse_int(&mut self) -> Result<i64, ParseError> {
        let neg = matches!(self.peek().tok, Tok::Minus);
        if neg {
            self.next();
        }
        let t = self.next();
        match t.tok {
            Tok::Num(n) if n.fract() == 0.0 && n.abs() < 9.007_199_254_740_992e15 => {
                let v = n as i64;
                Ok(if neg { -v } else { v })
            }
            other => Err(ParseError::new(
                t.pos,
                format!("expected integer priority, found {other}"),
            )),
        }
    }

    fn parse_action(&mut self) -> Result<RuleAction, ParseError> {
        let t = self.next();
        let kw = match t.tok {
            Tok::Ident(s) => s,
            Tok::Eof => return Err(ParseError::new(t.pos, "expected rule action, found end of input")),
            other => return Err(ParseError::new(t.pos, format!("expected rule action, found {other}"))),
        };
        match kw.as_str() {
            "select" => {
                let (a, pos) = self.expect_ident("activity id")?;
                self.check_activity(&a, pos)?;
                Ok(RuleAction::Select(a))
            }
            "forbid" => {
                let (a, pos) = self.expect_ident("activity id")?;
                self.check_activity(&a, pos)?;
                Ok(RuleAction::Forbid(a))
            }
            "set" => {
                let mut assigns = vec![self.parse_assignment()?];
                while matches!(self.peek().tok, Tok::Comma) {
                    self.next();
                    assigns.push(self.parse_assignment()?);
                }
                Ok(RuleAction::Assign(assigns))
            }
            "goal" => self.parse_goal_tail(),
            _ => Err(ParseError {
                pos: t.pos,
                message: format!("unknown rule kind keyword '{kw}'"),
                kind: ParseErrorKind::UnknownKind,
            }),
        }
    }

    fn parse_goal_tail(&mut self) -> Result<RuleAction, ParseError> {
        if !self.eat_kw("progress") {
            return Ok(RuleAction::Goal(None));
        }
        let pos = self.peek().pos;
        let (expr, ty) = self.parse_expr()?;
        if !ty.accepts(ValueType::Num) {
            return Err(Self::type_err(
                pos,
                format!("goal progress must be numeric, found {}", ty.describe()),
            ));
        }
        let direction = if self.eat_kw("maximize") {
            Direction::Maximize
        } else if self.eat_kw("minimize") {
            Direction::Minimize
        } else {
            let t = self.peek();
            return Err(ParseError::new(
                t.pos,
                format!("expected 'maximize' or 'minimize', found {}", t.tok),
            ));
        };
        Ok(RuleAction::Goal(Some(GoalProgress { expr, direction })))
    }

    fn parse_assignment(&mut self) -> Result<Assignment, ParseError> {
        let (target, pos) = self.expect_ident("variable name")?;
        let target_ty = self
            .env
            .assignable(&target)
            .ok_or_else(|| Self::type_err(pos, format!("'{target}' is not an assignable environment variable")))?;
        let t = self.next();
        if t.tok != Tok::Assign {
            return Err(ParseError::new(t.pos, format!("expected ':=', found {}", t.tok)));
        }
        let vpos = self.peek().pos;
        let (value, ty) = self.parse_expr()?;
        if !ty.compatible(target_ty) {
            return Err(Self::type_err(
                vpos,
                format!(
                    "cannot assign {} to '{target}' of type {}",
                    ty.describe(),
                    target_ty.describe()
                ),
            ));
        }
        Ok(Assignment { target, value })
    }

    pub(crate) fn parse_expr(&mut self) -> Result<(Expr, Ty), ParseError> {
        self.parse_or()
    }

    fn can_start_operand(&self) -> bool {
        match &self.peek().tok {
            Tok::Num(_) | Tok::Str(_) | Tok::LParen | Tok::Minus => true,
            Tok::Ident(s) => !is_reserved(s) || s == "true" || s == "false" || s == "not",
            _ => false,
        }
    }

    fn operand_after(&self, op: &Token) -> Result<(), ParseError> {
        if self.can_start_operand() {
            Ok(())
        } else {
            Err(ParseError::new(
                op.pos,
                format!(
                    "dangling operator {}: expected an operand, found {}",
                    op.tok,
                    self.peek().tok
                ),
            ))
        }
    }

    fn logic(&self, op: BinaryOp, pos: Pos, l: Ty, r: Ty) -> Result<Ty, ParseError> {
        if l.accepts(ValueType::Bool) && r.accepts(ValueType::Bool) {
            Ok(Ty::Known(ValueType::Bool))
        } else {
            Err(Self::type_err(
                pos,
                format!(
                    "operator '{}' expects booleans, found {} and {}",
                    op.symbol(),
                    l.describe(),
                    r.describe()
                ),
            ))
        }
    }

    fn parse_or(&mut self) -> Result<(Expr, Ty), ParseError> {
        let (mut lhs, mut lty) = self.parse_and()?;
        while self.is_kw("or") {
            let op = self.next();
            self.operand_after(&op)?;
            let (rhs, rty) = self.parse_and()?;
            lty = self.logic(BinaryOp::Or, op.pos, lty, rty)?;
            lhs = Expr::binary(BinaryOp::Or, lhs, rhs);
        }
        Ok((lhs, lty))
    }

    fn parse_and(&mut self) -> Result<(Expr, Ty), ParseError> {
        let (mut lhs, mut lty) = self.parse_not()?;
        while self.is_kw("and") {
            let op = self.next();
            self.operand_after(&op)?;
            let (rhs, rty) = self.parse_not()?;
            lty = self.logic(BinaryOp::And, op.pos, lty, rty)?;
            lhs = Expr::binary(BinaryOp::And, lhs, rhs);
        }
        Ok((lhs, lty))
    }

    fn parse_not(&mut self) -> Result<(Expr, Ty), ParseError> {
        if self.is_kw("not") {
            let op = self.next();
            self.operand_after(&op)?;
            let (e, ty) = self.parse_not()?;
            if !ty.accepts(ValueType::Bool) {
                return Err(Self::type_err(
                    op.pos,
                    format!("operator 'not' expects a boolean, found {}", ty.describe()),
                ));
            }
            return Ok((Expr::unary(UnaryOp::Not, e), Ty::Known(ValueType::Bool)));
        }
        self.parse_cmp()
    }

    fn parse_cmp(&mut self) -> Result<(Expr, Ty), ParseError> {
        let (mut lhs, mut lty) = self.parse_additive()?;
        loop {
            let op = match self.peek().tok {
                Tok::Lt => BinaryOp::Lt,
                Tok::Le => BinaryOp::Le,
                Tok::Gt => BinaryOp::Gt,
                Tok::Ge => BinaryOp::Ge,
                Tok::EqEq => BinaryOp::Eq,
                Tok::Ne => BinaryOp::Ne,
                _ => break,
            };
            let optok = self.next();
            self.operand_after(&optok)?;
            let (rhs, rty) = self.parse_additive()?;
            let ok = match op {
                BinaryOp::Eq | BinaryOp::Ne => lty.compatible(rty),
                _ => lty.accepts(ValueType::Num) && rty.accepts(ValueType::Num),
            };
            if !ok {
                return Err(Self::type_err(
                    optok.pos,
                    format!(
                        "operator '{}' cannot compare {} with {}",
                        op.symbol(),
                        lty.describe(),
                        rty.describe()
                    ),
                ));
            }
            lty = Ty::Known(ValueType::Bool);
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok((lhs, lty))
    }

    fn arith(&self, op: BinaryOp, pos: Pos, l: Ty, r: Ty) -> Result<Ty, ParseError> {
        if l.accepts(ValueType::Num) && r.accepts(ValueType::Num) {
            Ok(Ty::Known(ValueType::Num))
        } else {
            Err(Self::type_err(
                pos,
                format!(
                    "operator '{}' expects numbers, found {} and {}",
                    op.symbol(),
                    l.describe(),
                    r.describe()
                ),
            ))
        }
    }

    fn parse_additive(&mut self) -> Result<(Expr, Ty), ParseError> {
        let (mut lhs, mut lty) = self.parse_mul()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => break,
            };
            let optok = self.next();
            self.operand_after(&optok)?;
            let (rhs, rty) = self.parse_mul()?;
            lty = self.arith(op, optok.pos, lty, rty)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok((lhs, lty))
    }

    fn parse_mul(&mut self) -> Result<(Expr, Ty), ParseError> {
        let (mut lhs, mut lty) = self.parse_unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => break,
            };
            let optok = self.next();
            self.operand_after(&optok)?;
            let (rhs, rty) = self.parse_unary()?;
            lty = self.arith(op, optok.pos, lty, rty)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok((lhs, lty))
    }

    fn parse_unary(&mut self) -> Result<(Expr, Ty), ParseError> {
        if matches!(self.peek().tok, Tok::Minus) {
            let op = self.next();
            self.operand_after(&op)?;
            let (e, ty) = self.parse_unary()?;
            if !ty.accepts(ValueType::Num) {
                return Err(Self::type_err(
                    op.pos,
                    format!("unary '-' expects a number, found {}", ty.describe()),
                ));
            }
            return Ok((Expr::unary(UnaryOp::Neg, e), Ty::Known(ValueType::Num)));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<(Expr, Ty), ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Num(n) => Ok((Expr::Lit(Value::Num(n)), Ty::Known(ValueType::Num))),
            Tok::Str(s) => Ok((Expr::Lit(Value::Str(s)), Ty::Known(ValueType::Str))),
            Tok::LParen => {
                let inner = self.parse_expr()?;
                let close = self.next();
                if close.tok != Tok::RParen {
                    return Err(ParseError::new(close.pos, format!("expected ')', found {}", close.tok)));
                }
                Ok(inner)
            }
            Tok::Ident(s) if s == "true" => Ok((Expr::Lit(Value::Bool(true)), Ty::Known(ValueType::Bool))),
            Tok::Ident(s) if s == "false" => Ok((Expr::Lit(Value::Bool(false)), Ty::Known(ValueType::Bool))),
            Tok::Ident(s) if is_reserved(&s) => Err(ParseError::new(
                t.pos,
                format!("expected an expression, found keyword '{s}'"),
            )),
            Tok::Ident(s) => {
                if matches!(self.peek().tok, Tok::LParen) {
                    self.next();
                    return self.parse_call(s, t.pos);
                }
                match self.env.var_type(&s) {
                    Some(ty) => Ok((Expr::Var(s), ty)),
                    None => Err(Self::type_err(t.pos, format!("undeclared variable '{s}'"))),
                }
            }
            other => Err(ParseError::new(t.pos, format!("expected an expression, found {other}"))),
        }
    }

    fn parse_call(&mut self, name: String, pos: Pos) -> Result<(Expr, Ty), ParseError> {
        let (call, ty) = match name.as_str() {
            "executedCount" => {
                let (a, apos) = self.expect_ident("activity id")?;
                self.check_activity(&a, apos)?;
                (Builtin::ExecutedCount(a), ValueType::Num)
            }
            "elapsed" => (Builtin::Elapsed, ValueType::Num),
            "lastExecuted" => (Builtin::LastExecuted, ValueType::Str),
            _ => return Err(ParseError::new(pos, format!("unknown function '{name}'"))),
        };
        let close = self.next();
        if close.tok != Tok::RParen {
            return Err(ParseError::new(
                close.pos,
                format!("expected ')' to close call to '{name}', found {}", close.tok),
            ));
        }
        Ok((Expr::Call(call), Ty::Known(ty)))
    }
}
