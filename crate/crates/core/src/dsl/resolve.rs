//! Static name resolution: every identifier must be a local, a function in
//! the same source, a builtin, or part of the host binding surface.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ast::*;
use super::{ParseError, BUILTINS, HOST_FUNCTIONS, HOST_GLOBALS};

pub(super) fn check_identifiers(functions: &BTreeMap<String, FnDef>) -> Result<(), ParseError> {
    for f in functions.values() {
        let mut locals: BTreeSet<&str> = f.params.iter().map(String::as_str).collect();
        collect_locals(&f.body, &mut locals);
        let scope = Scope { locals: &locals, functions };
        check_block(&f.body, &scope)?;
    }
    Ok(())
}

struct Scope<'a> {
    locals: &'a BTreeSet<&'a str>,
    functions: &'a BTreeMap<String, FnDef>,
}

impl Scope<'_> {
    fn knows(&self, name: &str) -> bool {
        self.locals.contains(name)
            || self.functions.contains_key(name)
            || HOST_GLOBALS.contains(&name)
            || HOST_FUNCTIONS.contains(&name)
            || BUILTINS.contains(&name)
    }
}

fn collect_locals<'a>(block: &'a Block, out: &mut BTreeSet<&'a str>) {
    for stmt in block {
        match &stmt.kind {
            StmtKind::Assign { target, .. } => {
                out.insert(target.name.as_str());
            }
            StmtKind::If { branches, otherwise } => {
                for (_, b) in branches {
                    collect_locals(b, out);
                }
                if let Some(b) = otherwise {
                    collect_locals(b, out);
                }
            }
            StmtKind::For { var, body, .. } => {
                out.insert(var.as_str());
                collect_locals(body, out);
            }
            StmtKind::While { body, .. } => collect_locals(body, out),
            _ => {}
        }
    }
}

fn check_block(block: &Block, scope: &Scope<'_>) -> Result<(), ParseError> {
    for stmt in block {
        match &stmt.kind {
            StmtKind::Assign { target, value } => {
                for i in &target.indices {
                    check_expr(i, scope)?;
                }
                check_expr(value, scope)?;
            }
            StmtKind::If { branches, otherwise } => {
                for (c, b) in branches {
                    check_expr(c, scope)?;
                    check_block(b, scope)?;
                }
                if let Some(b) = otherwise {
                    check_block(b, scope)?;
                }
            }
            StmtKind::For { iter, body, .. } => {
                check_expr(iter, scope)?;
                check_block(body, scope)?;
            }
            StmtKind::While { cond, body } => {
                check_expr(cond, scope)?;
                check_block(body, scope)?;
            }
            StmtKind::Return(Some(e)) | StmtKind::Expr(e) => check_expr(e, scope)?,
            StmtKind::Return(None) | StmtKind::Break | StmtKind::Continue => {}
        }
    }
    Ok(())
}

fn check_expr(e: &Expr, scope: &Scope<'_>) -> Result<(), ParseError> {
    match &e.kind {
        ExprKind::Literal(_) => Ok(()),
        ExprKind::Name(n) => {
            if scope.knows(n) {
                Ok(())
            } else {
                Err(ParseError::UnknownIdentifier { name: n.clone(), pos: e.pos })
            }
        }
        ExprKind::List(items) => items.iter().try_for_each(|i| check_expr(i, scope)),
        ExprKind::Map(entries) => entries.iter().try_for_each(|(k, v)| {
            check_expr(k, scope)?;
            check_expr(v, scope)
        }),
        ExprKind::Neg(x) | ExprKind::Not(x) | ExprKind::Attr(x, _) => check_expr(x, scope),
        ExprKind::And(a, b) | ExprKind::Or(a, b) | ExprKind::Binary(_, a, b) | ExprKind::Index(a, b) => {
            check_expr(a, scope)?;
            check_expr(b, scope)
        }
        ExprKind::Ternary { cond, then, otherwise } => {
            check_expr(cond, scope)?;
            check_expr(then, scope)?;
            check_expr(otherwise, scope)
        }
        ExprKind::Call { callee, args, kwargs } => {
            check_expr(callee, scope)?;
            args.iter().try_for_each(|a| check_expr(a, scope))?;
            kwargs.iter().try_for_each(|(_, v)| check_expr(v, scope))
        }
    }
}

pub(super) fn collect_strings(block: &Block, out: &mut BTreeSet<String>) {
    fn expr(e: &Expr, out: &mut BTreeSet<String>) {
        match &e.kind {
            ExprKind::Literal(Literal::Str(s)) => {
                out.insert(s.clone());
            }
            ExprKind::Literal(_) | ExprKind::Name(_) => {}
            ExprKind::List(items) => items.iter().for_each(|i| expr(i, out)),
            ExprKind::Map(entries) => entries.iter().for_each(|(k, v)| {
                expr(k, out);
                expr(v, out);
            }),
            ExprKind::Neg(x) | ExprKind::Not(x) | ExprKind::Attr(x, _) => expr(x, out),
            ExprKind::And(a, b) | ExprKind::Or(a, b) | ExprKind::Binary(_, a, b) | ExprKind::Index(a, b) => {
                expr(a, out);
                expr(b, out);
            }
            ExprKind::Ternary { cond, then, otherwise } => {
                expr(cond, out);
                expr(then, out);
                expr(otherwise, out);
            }
            ExprKind::Call { callee, args, kwargs } => {
                expr(callee, out);
                args.iter().for_each(|a| expr(a, out));
                kwargs.iter().for_each(|(_, v)| expr(v, out));
            }
        }
    }
    for stmt in block {
        match &stmt.kind {
            StmtKind::Assign { target, value } => {
                target.indices.iter().for_each(|i| expr(i, out));
                expr(value, out);
            }
            StmtKind::If { branches, otherwise } => {
                for (c, b) in branches {
                    expr(c, out);
                    collect_strings(b, out);
                }
                if let Some(b) = otherwise {
                    collect_strings(b, out);
                }
            }
            StmtKind::For { iter, body, .. } => {
                expr(iter, out);
                collect_strings(body, out);
            }
            StmtKind::While { cond, body } => {
                expr(cond, out);
                collect_strings(body, out);
            }
            StmtKind::Return(Some(e)) | StmtKind::Expr(e) => expr(e, out),
            _ => {}
        }
    }
}

/// Every call site in `block`: plain calls by name, method calls as `.name`.
pub(super) fn collect_calls(block: &Block, out: &mut Vec<(String, Pos)>) {
    fn expr(e: &Expr, out: &mut Vec<(String, Pos)>) {
        match &e.kind {
            ExprKind::Literal(_) | ExprKind::Name(_) => {}
            ExprKind::List(items) => items.iter().for_each(|i| expr(i, out)),
            ExprKind::Map(entries) => entries.iter().for_each(|(k, v)| {
                expr(k, out);
                expr(v, out);
            }),
            ExprKind::Neg(x) | ExprKind::Not(x) | ExprKind::Attr(x, _) => expr(x, out),
            ExprKind::And(a, b) | ExprKind::Or(a, b) | ExprKind::Binary(_, a, b) | ExprKind::Index(a, b) => {
                expr(a, out);
                expr(b, out);
            }
            ExprKind::Ternary { cond, then, otherwise } => {
                expr(cond, out);
                expr(then, out);
                expr(otherwise, out);
            }
            ExprKind::Call { callee, args, kwargs } => {
                match &callee.kind {
                    ExprKind::Name(n) => out.push((n.clone(), e.pos)),
                    ExprKind::Attr(_, m) => out.push((format!(".{m}"), e.pos)),
                    _ => {}
                }
                expr(callee, out);
                args.iter().for_each(|a| expr(a, out));
                kwargs.iter().for_each(|(_, v)| expr(v, out));
            }
        }
    }
    for stmt in block {
        match &stmt.kind {
            StmtKind::Assign { target, value } => {
                target.indices.iter().for_each(|i| expr(i, out));
                expr(value, out);
            }
            StmtKind::If { branches, otherwise } => {
                for (c, b) in branches {
                    expr(c, out);
                    collect_calls(b, out);
                }
                if let Some(b) = otherwise {
                    collect_calls(b, out);
                }
            }
            StmtKind::For { iter, body, .. } => {
                expr(iter, out);
                collect_calls(body, out);
            }
            StmtKind::While { cond, body } => {
                expr(cond, out);
                collect_calls(body, out);
            }
            StmtKind::Return(Some(e)) | StmtKind::Expr(e) => expr(e, out),
            StmtKind::Return(None) | StmtKind::Break | StmtKind::Continue => {}
        }
    }
}
