//! Recursive-descent parser for policy sources.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ast::*;
use super::lexer::{Tok, Token};
use super::SyntaxError;

/// Positional and keyword arguments of a call.
type CallArgs = (Vec<Expr>, Vec<(String, Expr)>);

const MAX_NESTING: u32 = 96;

pub struct Parser {
    toks: Vec<Token>,
    at: usize,
    nesting: u32,
}

impl Parser {
    pub fn new(toks: Vec<Token>) -> Self {
        Parser { toks, at: 0, nesting: 0 }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].pos
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<Pos, SyntaxError> {
        if self.peek() == &tok {
            Ok(self.advance().pos)
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn unexpected(&self, expected: &str) -> SyntaxError {
        SyntaxError::new(
            self.pos(),
            format!("expected {expected}, found {}", self.peek().describe()),
        )
    }

    fn ident(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.advance();
                Ok(name)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Tok::Newline | Tok::Semi) {
            self.advance();
        }
    }

    fn enter(&mut self) -> Result<(), SyntaxError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(SyntaxError::new(self.pos(), "nesting too deep"));
        }
        Ok(())
    }

    fn leave(&mut self) {
        self.nesting -= 1;
    }

    pub fn program(&mut self) -> Result<Vec<FnDef>, SyntaxError> {
        let mut fns = Vec::new();
        loop {
            self.skip_newlines();
            match self.peek() {
                Tok::Eof => break,
                Tok::Def => fns.push(self.fndef()?),
                _ => return Err(self.unexpected("`def`")),
            }
        }
        Ok(fns)
    }

    fn fndef(&mut self) -> Result<FnDef, SyntaxError> {
        let pos = self.expect(Tok::Def)?;
        let name = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                params.push(self.ident()?);
                if self.eat(&Tok::Comma) {
                    if self.eat(&Tok::RParen) {
                        break;
                    }
                    continue;
                }
                self.expect(Tok::RParen)?;
                break;
            }
        }
        let body = self.block()?;
        Ok(FnDef { name, params, body, pos })
    }

    fn block(&mut self) -> Result<Block, SyntaxError> {
        self.enter()?;
        self.expect(Tok::LBrace)?;
        let mut stmts = Vec::new();
        loop {
            self.skip_newlines();
            if self.eat(&Tok::RBrace) {
                break;
            }
            if self.peek() == &Tok::Eof {
                return Err(self.unexpected("`}`"));
            }
            stmts.push(self.stmt()?);
        }
        self.leave();
        Ok(stmts)
    }

    fn end_simple(&mut self) -> Result<(), SyntaxError> {
        match self.peek() {
            Tok::Newline | Tok::Semi => {
                self.advance();
                Ok(())
            }
            Tok::RBrace | Tok::Eof => Ok(()),
            _ => Err(self.unexpected("end of statement")),
        }
    }

    fn stmt(&mut self) -> Result<Stmt, SyntaxError> {
        let pos = self.pos();
        let kind = match self.peek() {
            Tok::If => {
                self.advance();
                let mut branches = Vec::new();
                let cond = self.expr()?;
                let body = self.block()?;
                branches.push((cond, body));
                let mut otherwise = None;
                loop {
                    let save = self.at;
                    self.skip_newlines();
                    if self.eat(&Tok::Elif) {
                        let cond = self.expr()?;
                        let body = self.block()?;
                        branches.push((cond, body));
                    } else if self.eat(&Tok::Else) {
                        otherwise = Some(self.block()?);
                        break;
                    } else {
                        self.at = save;
                        break;
                    }
                }
                StmtKind::If { branches, otherwise }
            }
            Tok::For => {
                self.advance();
                let var = self.ident()?;
                self.expect(Tok::In)?;
                let iter = self.expr()?;
                let body = self.block()?;
                StmtKind::For { var, iter, body }
            }
            Tok::While => {
                self.advance();
                let cond = self.expr()?;
                let body = self.block()?;
                StmtKind::While { cond, body }
            }
            Tok::Return => {
                self.advance();
                let value = match self.peek() {
                    Tok::Newline | Tok::Semi | Tok::RBrace | Tok::Eof => None,
                    _ => Some(self.expr()?),
                };
                self.end_simple()?;
                StmtKind::Return(value)
            }
            Tok::Break => {
                self.advance();
                self.end_simple()?;
                StmtKind::Break
            }
            Tok::Continue => {
                self.advance();
                self.end_simple()?;
                StmtKind::Continue
            }
            _ => {
                let e = self.expr()?;
                if self.peek() == &Tok::Assign {
                    let target = to_target(e)?;
                    self.advance();
                    let value = self.expr()?;
                    self.end_simple()?;
                    StmtKind::Assign { target, value }
                } else {
                    self.end_simple()?;
                    StmtKind::Expr(e)
                }
            }
        };
        Ok(Stmt { kind, pos })
    }

    pub fn expr(&mut self) -> Result<Expr, SyntaxError> {
        self.enter()?;
        let then = self.or_expr()?;
        let out = if self.peek() == &Tok::If {
            let pos = then.pos;
            self.advance();
            let cond = self.or_expr()?;
            self.expect(Tok::Else)?;
            let otherwise = self.expr()?;
            Expr {
                kind: ExprKind::Ternary {
                    cond: Box::new(cond),
                    then: Box::new(then),
                    otherwise: Box::new(otherwise),
                },
                pos,
            }
        } else {
            then
        };
        self.leave();
        Ok(out)
    }

    fn or_expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.and_expr()?;
        while self.peek() == &Tok::Or {
            let pos = self.advance().pos;
            let rhs = self.and_expr()?;
            lhs = Expr { kind: ExprKind::Or(Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.not_expr()?;
        while self.peek() == &Tok::And {
            let pos = self.advance().pos;
            let rhs = self.not_expr()?;
            lhs = Expr { kind: ExprKind::And(Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, SyntaxError> {
        if self.peek() == &Tok::Not {
            let pos = self.advance().pos;
            self.enter()?;
            let inner = self.not_expr()?;
            self.leave();
            return Ok(Expr { kind: ExprKind::Not(Box::new(inner)), pos });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.additive()?;
        loop {
            let op = match self.peek() {
                Tok::Eq => BinOp::Eq,
                Tok::Ne => BinOp::Ne,
                Tok::Lt => BinOp::Lt,
                Tok::Le => BinOp::Le,
                Tok::Gt => BinOp::Gt,
                Tok::Ge => BinOp::Ge,
                Tok::In => BinOp::In,
                Tok::Not if self.toks.get(self.at + 1).map(|t| &t.tok) == Some(&Tok::In) => {
                    self.advance();
                    BinOp::NotIn
                }
                _ => break,
            };
            let pos = self.advance().pos;
            let rhs = self.additive()?;
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            let pos = self.advance().pos;
            let rhs = self.term()?;
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Percent => BinOp::Rem,
                _ => break,
            };
            let pos = self.advance().pos;
            let rhs = self.unary()?;
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), pos };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.peek() == &Tok::Minus {
            let pos = self.advance().pos;
            self.enter()?;
            let inner = self.unary()?;
            self.leave();
            return Ok(Expr { kind: ExprKind::Neg(Box::new(inner)), pos });
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, SyntaxError> {
        let mut e = self.primary()?;
        loop {
            match self.peek() {
                Tok::Dot => {
                    let pos = self.advance().pos;
                    let name = self.ident()?;
                    e = Expr { kind: ExprKind::Attr(Box::new(e), name), pos };
                }
                Tok::LBracket => {
                    let pos = self.advance().pos;
                    let idx = self.expr()?;
                    self.expect(Tok::RBracket)?;
                    e = Expr { kind: ExprKind::Index(Box::new(e), Box::new(idx)), pos };
                }
                Tok::LParen => {
                    let pos = self.advance().pos;
                    let (args, kwargs) = self.call_args()?;
                    e = Expr { kind: ExprKind::Call { callee: Box::new(e), args, kwargs }, pos };
                }
                _ => break,
            }
        }
        Ok(e)
    }

    fn call_args(&mut self) -> Result<CallArgs, SyntaxError> {
        let mut args = Vec::new();
        let mut kwargs: Vec<(String, Expr)> = Vec::new();
        if self.eat(&Tok::RParen) {
            return Ok((args, kwargs));
        }
        loop {
            let is_kw = matches!(self.peek(), Tok::Ident(_))
                && self.toks.get(self.at + 1).map(|t| &t.tok) == Some(&Tok::Assign);
            if is_kw {
                let pos = self.pos();
                let name = self.ident()?;
                self.advance();
                if kwargs.iter().any(|(k, _)| *k == name) {
                    return Err(SyntaxError::new(pos, format!("duplicate keyword argument `{name}`")));
                }
                kwargs.push((name, self.expr()?));
            } else {
                if !kwargs.is_empty() {
                    return Err(SyntaxError::new(
                        self.pos(),
                        "positional argument after keyword argument",
                    ));
                }
                args.push(self.expr()?);
            }
            if self.eat(&Tok::Comma) {
                if self.eat(&Tok::RParen) {
                    break;
                }
                continue;
            }
            self.expect(Tok::RParen)?;
            break;
        }
        Ok((args, kwargs))
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        let pos = self.pos();
        let kind = match self.peek().clone() {
            Tok::Int(n) => {
                self.advance();
                ExprKind::Literal(Literal::Int(n))
            }
            Tok::Float(x) => {
                self.advance();
                ExprKind::Literal(Literal::Float(x))
            }
            Tok::Str(s) => {
                self.advance();
                ExprKind::Literal(Literal::Str(s))
            }
            Tok::True => {
                self.advance();
                ExprKind::Literal(Literal::Bool(true))
            }
            Tok::False => {
                self.advance();
                ExprKind::Literal(Literal::Bool(false))
            }
            Tok::None => {
                self.advance();
                ExprKind::Literal(Literal::None)
            }
            Tok::Ident(name) => {
                self.advance();
                ExprKind::Name(name)
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                return Ok(e);
            }
            Tok::LBracket => {
                self.advance();
                let mut items = Vec::new();
                if !self.eat(&Tok::RBracket) {
                    loop {
                        items.push(self.expr()?);
                        if self.eat(&Tok::Comma) {
                            if self.eat(&Tok::RBracket) {
                                break;
                            }
                            continue;
                        }
                        self.expect(Tok::RBracket)?;
                        break;
                    }
                }
                ExprKind::List(items)
            }
            Tok::LBrace => {
                self.advance();
                let mut entries = Vec::new();
                self.skip_newlines();
                if !self.eat(&Tok::RBrace) {
                    loop {
                        self.skip_newlines();
                        let k = self.expr()?;
                        self.skip_newlines();
                        self.expect(Tok::Colon)?;
                        self.skip_newlines();
                        let v = self.expr()?;
                        entries.push((k, v));
                        self.skip_newlines();
                        if self.eat(&Tok::Comma) {
                            self.skip_newlines();
                            if self.eat(&Tok::RBrace) {
                                break;
                            }
                            continue;
                        }
                        self.expect(Tok::RBrace)?;
                        break;
                    }
                }
                ExprKind::Map(entries)
            }
            _ => return Err(self.unexpected("expression")),
        };
        Ok(Expr { kind, pos })
    }
}

fn to_target(e: Expr) -> Result<Target, SyntaxError> {
    let pos = e.pos;
    let mut indices = Vec::new();
    let mut cur = e;
    loop {
        match cur.kind {
            ExprKind::Name(name) => {
                indices.reverse();
                return Ok(Target { name, indices });
            }
            ExprKind::Index(obj, idx) => {
                indices.push(*idx);
                cur = *obj;
            }
            _ => return Err(SyntaxError::new(pos, "invalid assignment target")),
        }
    }
}
