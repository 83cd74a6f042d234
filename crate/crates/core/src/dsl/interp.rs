//! Tree-walking evaluator with step, host-call and wall-clock budgets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::ast::*;
use super::value::{ObjRef, Value};
use super::{PolicyProgram, BUILTINS};
use crate::error::ErrorCode;
use crate::time::Span;

/// Limits applied to a single function evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionBudget {
    pub max_steps: u64,
    pub max_host_calls: u32,
    pub wall_timeout: Span,
}

impl Default for ExecutionBudget {
    fn default() -> Self {
        ExecutionBudget {
            max_steps: 100_000,
            max_host_calls: 50,
            wall_timeout: Span::seconds(2),
        }
    }
}

const MAX_CALL_DEPTH: u32 = 48;
const DEADLINE_CHECK_EVERY: u64 = 256;

/// Error raised by a host function or method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostError {
    pub code: ErrorCode,
    pub message: String,
}

impl HostError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        HostError { code, message: message.into() }
    }
    pub fn runtime(message: impl Into<String>) -> Self {
        HostError::new(ErrorCode::RuntimeError, message)
    }
    pub fn denied(capability: &str, what: &str) -> Self {
        HostError::new(
            ErrorCode::CapabilityDenied,
            format!("`{what}` requires capability {capability}"),
        )
    }
}

/// Error that aborted an evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalError {
    pub code: ErrorCode,
    pub message: String,
    pub pos: Pos,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}:{}: {}", self.code, self.pos.line, self.pos.col, self.message)
    }
}

/// The sandbox side of an evaluation. All governance state is reached
/// through this trait; the interpreter itself has no other ambient authority.
pub trait Host {
    fn global(&mut self, name: &str) -> Option<Value>;
    fn attr(&mut self, obj: &ObjRef, name: &str) -> Result<Value, HostError>;
    fn call_method(
        &mut self,
        obj: &ObjRef,
        name: &str,
        args: Vec<Value>,
        kwargs: Vec<(String, Value)>,
    ) -> Result<Value, HostError>;
    fn call_function(
        &mut self,
        name: &str,
        args: Vec<Value>,
        kwargs: Vec<(String, Value)>,
    ) -> Result<Value, HostError>;
    fn iterate(&mut self, obj: &ObjRef) -> Result<Vec<Value>, HostError>;
    fn deadline_expired(&self) -> bool {
        false
    }
}

/// Runs function `name` of `program`. Declared parameters are bound
/// positionally from `args` (the engine passes `action, policy`).
/// A function that falls off its end returns `none`.
pub fn evaluate(
    program: &PolicyProgram,
    name: &str,
    args: &[Value],
    host: &mut dyn Host,
    budget: &ExecutionBudget,
) -> Result<Value, EvalError> {
    let mut it = Interp { program, host, budget, steps: 0, host_calls: 0, depth: 0 };
    let Some(f) = program.function(name) else {
        return Err(EvalError {
            code: ErrorCode::RuntimeError,
            message: format!("no function `{name}`"),
            pos: Pos::default(),
        });
    };
    if f.params.len() > args.len() {
        return Err(EvalError {
            code: ErrorCode::RuntimeError,
            message: format!("`{name}` declares {} parameters, at most {} are bound", f.params.len(), args.len()),
            pos: f.pos,
        });
    }
    it.call_user(f, args[..f.params.len()].to_vec(), f.pos)
}

enum Flow {
    Normal,
    Return(Value),
    Break,
    Continue,
}

struct Interp<'a> {
    program: &'a PolicyProgram,
    host: &'a mut dyn Host,
    budget: &'a ExecutionBudget,
    steps: u64,
    host_calls: u32,
    depth: u32,
}

type Locals = BTreeMap<String, Value>;
/// Evaluated positional and keyword arguments.
type Args = (Vec<Value>, Vec<(String, Value)>);

fn err(code: ErrorCode, pos: Pos, message: impl Into<String>) -> EvalError {
    EvalError { code, message: message.into(), pos }
}

fn rt(pos: Pos, message: impl Into<String>) -> EvalError {
    err(ErrorCode::RuntimeError, pos, message)
}

impl Interp<'_> {
    fn step(&mut self, pos: Pos) -> Result<(), EvalError> {
        self.steps += 1;
        if self.steps > self.budget.max_steps {
            return Err(err(
                ErrorCode::BudgetExceeded,
                pos,
                format!("step budget of {} exhausted", self.budget.max_steps),
            ));
        }
        if self.steps.is_multiple_of(DEADLINE_CHECK_EVERY) && self.host.deadline_expired() {
            return Err(err(
                ErrorCode::BudgetExceeded,
                pos,
                format!("wall-clock budget of {} exhausted", self.budget.wall_timeout),
            ));
        }
        Ok(())
    }

    fn count_host_call(&mut self, pos: Pos) -> Result<(), EvalError> {
        self.host_calls += 1;
        if self.host_calls > self.budget.max_host_calls {
            return Err(err(
                ErrorCode::BudgetExceeded,
                pos,
                format!("host-call budget of {} exhausted", self.budget.max_host_calls),
            ));
        }
        Ok(())
    }

    fn host_err(e: HostError, pos: Pos) -> EvalError {
        EvalError { code: e.code, message: e.message, pos }
    }

    fn call_user(&mut self, f: &FnDef, args: Vec<Value>, pos: Pos) -> Result<Value, EvalError> {
        if args.len() != f.params.len() {
            return Err(rt(
                pos,
                format!("`{}` takes {} arguments, {} given", f.name, f.params.len(), args.len()),
            ));
        }
        self.depth += 1;
        if self.depth > MAX_CALL_DEPTH {
            return Err(rt(pos, "maximum call depth exceeded"));
        }
        self.step(pos)?;
        let mut locals: Locals = f.params.iter().cloned().zip(args).collect();
        let out = match self.block(&f.body, &mut locals)? {
            Flow::Return(v) => v,
            Flow::Normal => Value::None,
            Flow::Break | Flow::Continue => return Err(rt(pos, "`break`/`continue` outside loop")),
        };
        self.depth -= 1;
        Ok(out)
    }

    fn block(&mut self, stmts: &Block, locals: &mut Locals) -> Result<Flow, EvalError> {
        for s in stmts {
            match self.stmt(s, locals)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Normal)
    }

    fn stmt(&mut self, s: &Stmt, locals: &mut Locals) -> Result<Flow, EvalError> {
        self.step(s.pos)?;
        match &s.kind {
            StmtKind::Assign { target, value } => {
                let v = self.expr(value, locals)?;
                self.assign(target, v, locals, s.pos)?;
                Ok(Flow::Normal)
            }
            StmtKind::If { branches, otherwise } => {
                for (cond, body) in branches {
                    if self.expr(cond, locals)?.truthy() {
                        return self.block(body, locals);
                    }
                }
                match otherwise {
                    Some(body) => self.block(body, locals),
                    None => Ok(Flow::Normal),
                }
            }
            StmtKind::For { var, iter, body } => {
                let coll = self.expr(iter, locals)?;
                let items = self.iter_items(coll, iter.pos)?;
                for item in items {
                    self.step(s.pos)?;
                    locals.insert(var.clone(), item);
                    match self.block(body, locals)? {
                        Flow::Break => break,
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
                Ok(Flow::Normal)
            }
            StmtKind::While { cond, body } => {
                loop {
                    self.step(s.pos)?;
                    if !self.expr(cond, locals)?.truthy() {
                        break;
                    }
                    match self.block(body, locals)? {
                        Flow::Break => break,
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
                Ok(Flow::Normal)
            }
            StmtKind::Return(e) => {
                let v = match e {
                    Some(e) => self.expr(e, locals)?,
                    None => Value::None,
                };
                Ok(Flow::Return(v))
            }
            StmtKind::Break => Ok(Flow::Break),
            StmtKind::Continue => Ok(Flow::Continue),
            StmtKind::Expr(e) => {
                self.expr(e, locals)?;
                Ok(Flow::Normal)
            }
        }
    }

    fn assign(&mut self, target: &Target, v: Value, locals: &mut Locals, pos: Pos) -> Result<(), EvalError> {
        if target.indices.is_empty() {
            locals.insert(target.name.clone(), v);
            return Ok(());
        }
        let mut keys = Vec::with_capacity(target.indices.len());
        for i in &target.indices {
            keys.push(self.expr(i, locals)?);
        }
        let Some(root) = locals.get_mut(&target.name) else {
            return Err(rt(pos, format!("`{}` is not assigned", target.name)));
        };
        let mut slot = root;
        for (n, key) in keys.iter().enumerate() {
            let last = n + 1 == keys.len();
            slot = match (slot, key) {
                (Value::List(items), Value::Int(i)) => {
                    let idx = normalize_index(*i, items.len()).ok_or_else(|| rt(pos, format!("index {i} out of range")))?;
                    &mut items[idx]
                }
                (Value::Map(m), Value::Str(k)) => {
                    if last {
                        m.entry(k.clone()).or_insert(Value::None)
                    } else {
                        m.get_mut(k).ok_or_else(|| rt(pos, format!("no key {k:?}")))?
                    }
                }
                (container, key) => {
                    return Err(rt(
                        pos,
                        format!("cannot index {} with {}", container.type_name(), key.type_name()),
                    ))
                }
            };
        }
        *slot = v;
        Ok(())
    }

    fn iter_items(&mut self, coll: Value, pos: Pos) -> Result<Vec<Value>, EvalError> {
        match coll {
            Value::List(items) => Ok(items),
            Value::Map(m) => Ok(m.into_keys().map(Value::Str).collect()),
            Value::Str(s) => Ok(s.chars().map(|c| Value::Str(c.to_string())).collect()),
            Value::Object(o) => self.host.iterate(&o).map_err(|e| Self::host_err(e, pos)),
            other => Err(rt(pos, format!("cannot iterate over {}", other.type_name()))),
        }
    }

    fn lookup(&mut self, name: &str, locals: &Locals, pos: Pos) -> Result<Value, EvalError> {
        if let Some(v) = locals.get(name) {
            return Ok(v.clone());
        }
        if let Some(v) = self.host.global(name) {
            return Ok(v);
        }
        if self.program.function(name).is_some() || BUILTINS.contains(&name) {
            return Err(rt(pos, format!("function `{name}` used as a value")));
        }
        Err(rt(pos, format!("`{name}` is not assigned")))
    }

    fn expr(&mut self, e: &Expr, locals: &mut Locals) -> Result<Value, EvalError> {
        let pos = e.pos;
        Ok(match &e.kind {
            ExprKind::Literal(l) => match l {
                Literal::None => Value::None,
                Literal::Bool(b) => Value::Bool(*b),
                Literal::Int(n) => Value::Int(*n),
                Literal::Float(x) => Value::Float(*x),
                Literal::Str(s) => Value::Str(s.clone()),
            },
            ExprKind::Name(n) => self.lookup(n, locals, pos)?,
            ExprKind::List(items) => {
                let mut out = Vec::with_capacity(items.len());
                for i in items {
                    out.push(self.expr(i, locals)?);
                }
                Value::List(out)
            }
            ExprKind::Map(entries) => {
                let mut out = BTreeMap::new();
                for (k, v) in entries {
                    let key = match self.expr(k, locals)? {
                        Value::Str(s) => s,
                        Value::Object(o) if o.id().is_some() => o.id().unwrap_or_default().to_string(),
                        other => return Err(rt(k.pos, format!("map keys must be strings, got {}", other.type_name()))),
                    };
                    let val = self.expr(v, locals)?;
                    out.insert(key, val);
                }
                Value::Map(out)
            }
            ExprKind::Neg(x) => match self.expr(x, locals)? {
                Value::Int(n) => Value::Int(n.checked_neg().ok_or_else(|| rt(pos, "integer overflow"))?),
                Value::Float(f) => Value::Float(-f),
                Value::Duration(d) => Value::Duration(Span::ZERO - d),
                other => return Err(rt(pos, format!("cannot negate {}", other.type_name()))),
            },
            ExprKind::Not(x) => Value::Bool(!self.expr(x, locals)?.truthy()),
            ExprKind::And(a, b) => {
                let l = self.expr(a, locals)?;
                if !l.truthy() {
                    l
                } else {
                    self.expr(b, locals)?
                }
            }
            ExprKind::Or(a, b) => {
                let l = self.expr(a, locals)?;
                if l.truthy() {
                    l
                } else {
                    self.expr(b, locals)?
                }
            }
            ExprKind::Ternary { cond, then, otherwise } => {
                if self.expr(cond, locals)?.truthy() {
                    self.expr(then, locals)?
                } else {
                    self.expr(otherwise, locals)?
                }
            }
            ExprKind::Binary(op, a, b) => {
                let l = self.expr(a, locals)?;
                let r = self.expr(b, locals)?;
                self.binary(*op, l, r, pos)?
            }
            ExprKind::Attr(obj, name) => {
                let o = self.expr(obj, locals)?;
                match o {
                    Value::Object(r) => self.host.attr(&r, name).map_err(|e| Self::host_err(e, pos))?,
                    Value::Map(m) => m.get(name).cloned().ok_or_else(|| rt(pos, format!("no key {name:?}")))?,
                    other => return Err(rt(pos, format!("{} has no attribute `{name}`", other.type_name()))),
                }
            }
            ExprKind::Index(obj, idx) => {
                let o = self.expr(obj, locals)?;
                let i = self.expr(idx, locals)?;
                index(o, i, pos)?
            }
            ExprKind::Call { callee, args, kwargs } => self.call(callee, args, kwargs, locals, pos)?,
        })
    }

    fn eval_args(
        &mut self,
        args: &[Expr],
        kwargs: &[(String, Expr)],
        locals: &mut Locals,
    ) -> Result<Args, EvalError> {
        let mut a = Vec::with_capacity(args.len());
        for x in args {
            a.push(self.expr(x, locals)?);
        }
        let mut k = Vec::with_capacity(kwargs.len());
        for (n, x) in kwargs {
            k.push((n.clone(), self.expr(x, locals)?));
        }
        Ok((a, k))
    }

    fn call(
        &mut self,
        callee: &Expr,
        args: &[Expr],
        kwargs: &[(String, Expr)],
        locals: &mut Locals,
        pos: Pos,
    ) -> Result<Value, EvalError> {
        self.step(pos)?;
        match &callee.kind {
            ExprKind::Name(name) if !locals.contains_key(name) => {
                let (a, k) = self.eval_args(args, kwargs, locals)?;
                if let Some(f) = self.program.function(name) {
                    if !k.is_empty() {
                        return Err(rt(pos, format!("`{name}` does not take keyword arguments")));
                    }
                    return self.call_user(f, a, pos);
                }
                if BUILTINS.contains(&name.as_str()) {
                    if !k.is_empty() {
                        return Err(rt(pos, format!("`{name}` does not take keyword arguments")));
                    }
                    return self.builtin(name, a, pos);
                }
                self.count_host_call(pos)?;
                self.host.call_function(name, a, k).map_err(|e| Self::host_err(e, pos))
            }
            ExprKind::Attr(obj, method) => {
                let o = self.expr(obj, locals)?;
                let (a, k) = self.eval_args(args, kwargs, locals)?;
                match o {
                    Value::Object(r) => {
                        self.count_host_call(pos)?;
                        self.host.call_method(&r, method, a, k).map_err(|e| Self::host_err(e, pos))
                    }
                    other => {
                        if !k.is_empty() {
                            return Err(rt(pos, format!("`{method}` does not take keyword arguments")));
                        }
                        native_method(other, method, a, pos)
                    }
                }
            }
            _ => {
                let v = self.expr(callee, locals)?;
                Err(rt(pos, format!("{} is not callable", v.type_name())))
            }
        }
    }

    fn binary(&mut self, op: BinOp, l: Value, r: Value, pos: Pos) -> Result<Value, EvalError> {
        use Value::*;
        let overflow = || rt(pos, "integer overflow");
        Ok(match op {
            BinOp::Eq => Bool(l.loose_eq(&r)),
            BinOp::Ne => Bool(!l.loose_eq(&r)),
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                let ord = l.compare(&r).ok_or_else(|| {
                    rt(pos, format!("cannot compare {} with {}", l.type_name(), r.type_name()))
                })?;
                Bool(match op {
                    BinOp::Lt => ord == Ordering::Less,
                    BinOp::Le => ord != Ordering::Greater,
                    BinOp::Gt => ord == Ordering::Greater,
                    _ => ord != Ordering::Less,
                })
            }
            BinOp::In | BinOp::NotIn => {
                let found = self.contains(&r, &l, pos)?;
                Bool(if op == BinOp::In { found } else { !found })
            }
            BinOp::Add => match (l, r) {
                (Int(a), Int(b)) => Int(a.checked_add(b).ok_or_else(overflow)?),
                (Int(a), Float(b)) => Float(a as f64 + b),
                (Float(a), Int(b)) => Float(a + b as f64),
                (Float(a), Float(b)) => Float(a + b),
                (Str(a), Str(b)) => Str(a + &b),
                (List(mut a), List(b)) => {
                    self.charge(b.len() as u64, pos)?;
                    a.extend(b);
                    List(a)
                }
                (Duration(a), Duration(b)) => Duration(a + b),
                (Time(t), Duration(d)) | (Duration(d), Time(t)) => Time(t + d),
                (a, b) => return Err(type_mismatch("+", &a, &b, pos)),
            },
            BinOp::Sub => match (l, r) {
                (Int(a), Int(b)) => Int(a.checked_sub(b).ok_or_else(overflow)?),
                (Int(a), Float(b)) => Float(a as f64 - b),
                (Float(a), Int(b)) => Float(a - b as f64),
                (Float(a), Float(b)) => Float(a - b),
                (Duration(a), Duration(b)) => Duration(a - b),
                (Time(t), Duration(d)) => Time(t - d),
                (Time(a), Time(b)) => Duration(a.since(b)),
                (a, b) => return Err(type_mismatch("-", &a, &b, pos)),
            },
            BinOp::Mul => match (l, r) {
                (Int(a), Int(b)) => Int(a.checked_mul(b).ok_or_else(overflow)?),
                (Int(a), Float(b)) => Float(a as f64 * b),
                (Float(a), Int(b)) => Float(a * b as f64),
                (Float(a), Float(b)) => Float(a * b),
                (Duration(d), Int(n)) | (Int(n), Duration(d)) => Duration(Span::from_millis(
                    d.as_millis().checked_mul(n).ok_or_else(overflow)?,
                )),
                (a, b) => return Err(type_mismatch("*", &a, &b, pos)),
            },
            BinOp::Div => match (l, r) {
                (_, Int(0)) => return Err(rt(pos, "division by zero")),
                (_, Float(0.0)) => return Err(rt(pos, "division by zero")),
                (Int(a), Int(b)) => Int(a.checked_div_euclid(b).ok_or_else(overflow)?),
                (Int(a), Float(b)) => Float(a as f64 / b),
                (Float(a), Int(b)) => Float(a / b as f64),
                (Float(a), Float(b)) => Float(a / b),
                (Duration(d), Int(n)) => Duration(Span::from_millis(d.as_millis() / n)),
                (a, b) => return Err(type_mismatch("/", &a, &b, pos)),
            },
            BinOp::Rem => match (l, r) {
                (_, Int(0)) => return Err(rt(pos, "division by zero")),
                (_, Float(0.0)) => return Err(rt(pos, "division by zero")),
                (Int(a), Int(b)) => Int(a.checked_rem_euclid(b).ok_or_else(overflow)?),
                (Float(a), Float(b)) => Float(a % b),
                (Int(a), Float(b)) => Float(a as f64 % b),
                (Float(a), Int(b)) => Float(a % b as f64),
                (a, b) => return Err(type_mismatch("%", &a, &b, pos)),
            },
        })
    }

    /// Charges `n` extra steps for bulk work such as building large lists.
    fn charge(&mut self, n: u64, pos: Pos) -> Result<(), EvalError> {
        if self.steps.saturating_add(n) > self.budget.max_steps {
            self.steps = self.budget.max_steps;
            return self.step(pos);
        }
        self.steps += n;
        Ok(())
    }

    fn contains(&mut self, coll: &Value, needle: &Value, pos: Pos) -> Result<bool, EvalError> {
        Ok(match coll {
            Value::List(items) => items.iter().any(|x| same_entity(x, needle)),
            Value::Map(m) => match needle {
                Value::Str(k) => m.contains_key(k),
                _ => false,
            },
            Value::Str(s) => match needle {
                Value::Str(sub) => s.contains(sub.as_str()),
                other => return Err(rt(pos, format!("cannot search a string for {}", other.type_name()))),
            },
            Value::Object(o) => {
                let items = self.host.iterate(o).map_err(|e| Self::host_err(e, pos))?;
                items.iter().any(|x| same_entity(x, needle))
            }
            other => return Err(rt(pos, format!("cannot search in {}", other.type_name()))),
        })
    }

    fn builtin(&mut self, name: &str, args: Vec<Value>, pos: Pos) -> Result<Value, EvalError> {
        let arity = |n: usize| -> Result<(), EvalError> {
            if args.len() != n {
                Err(rt(pos, format!("`{name}` takes {n} argument(s), {} given", args.len())))
            } else {
                Ok(())
            }
        };
        match name {
            "len" => {
                arity(1)?;
                let n = match &args[0] {
                    Value::Str(s) => s.chars().count(),
                    Value::List(l) => l.len(),
                    Value::Map(m) => m.len(),
                    Value::Object(o) => self.host.iterate(o).map_err(|e| Self::host_err(e, pos))?.len(),
                    other => return Err(rt(pos, format!("{} has no length", other.type_name()))),
                };
                Ok(Value::Int(n as i64))
            }
            "str" => {
                arity(1)?;
                Ok(Value::Str(args[0].to_string()))
            }
            "int" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(n) => Ok(Value::Int(*n)),
                    Value::Float(x) if x.is_finite() => Ok(Value::Int(*x as i64)),
                    Value::Bool(b) => Ok(Value::Int(*b as i64)),
                    Value::Str(s) => s
                        .trim()
                        .parse()
                        .map(Value::Int)
                        .map_err(|_| rt(pos, format!("cannot convert {s:?} to int"))),
                    other => Err(rt(pos, format!("cannot convert {} to int", other.type_name()))),
                }
            }
            "float" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(n) => Ok(Value::Float(*n as f64)),
                    Value::Float(x) => Ok(Value::Float(*x)),
                    Value::Str(s) => s
                        .trim()
                        .parse()
                        .map(Value::Float)
                        .map_err(|_| rt(pos, format!("cannot convert {s:?} to float"))),
                    other => Err(rt(pos, format!("cannot convert {} to float", other.type_name()))),
                }
            }
            "range" => {
                let (lo, hi) = match args.as_slice() {
                    [Value::Int(hi)] => (0, *hi),
                    [Value::Int(lo), Value::Int(hi)] => (*lo, *hi),
                    _ => return Err(rt(pos, "`range` takes one or two integers")),
                };
                let n = hi.saturating_sub(lo).max(0) as u64;
                self.charge(n, pos)?;
                Ok(Value::List((lo..hi).map(Value::Int).collect()))
            }
            "contains" => {
                arity(2)?;
                let found = self.contains(&args[0], &args[1], pos)?;
                Ok(Value::Bool(found))
            }
            "keys" => {
                arity(1)?;
                match &args[0] {
                    Value::Map(m) => Ok(Value::List(m.keys().cloned().map(Value::Str).collect())),
                    other => Err(rt(pos, format!("{} has no keys", other.type_name()))),
                }
            }
            "abs" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(n) => Ok(Value::Int(n.checked_abs().ok_or_else(|| rt(pos, "integer overflow"))?)),
                    Value::Float(x) => Ok(Value::Float(if *x < 0.0 { -*x } else { *x })),
                    other => Err(rt(pos, format!("cannot take abs of {}", other.type_name()))),
                }
            }
            "min" | "max" => {
                let items = match args.as_slice() {
                    [Value::List(items)] => items.clone(),
                    [] => return Err(rt(pos, format!("`{name}` needs arguments"))),
                    _ => args,
                };
                let mut best: Option<Value> = None;
                for v in items {
                    best = Some(match best {
                        None => v,
                        Some(b) => {
                            let ord = v.compare(&b).ok_or_else(|| {
                                rt(pos, format!("cannot compare {} with {}", v.type_name(), b.type_name()))
                            })?;
                            let take = if name == "min" { ord == Ordering::Less } else { ord == Ordering::Greater };
                            if take {
                                v
                            } else {
                                b
                            }
                        }
                    });
                }
                best.ok_or_else(|| rt(pos, format!("`{name}` of empty list")))
            }
            "sorted" => {
                arity(1)?;
                let Value::List(mut items) = args.into_iter().next().unwrap_or(Value::None) else {
                    return Err(rt(pos, "`sorted` takes a list"));
                };
                let mut failed = false;
                items.sort_by(|a, b| {
                    a.compare(b).unwrap_or_else(|| {
                        failed = true;
                        Ordering::Equal
                    })
                });
                if failed {
                    return Err(rt(pos, "`sorted` needs mutually comparable items"));
                }
                Ok(Value::List(items))
            }
            _ => Err(rt(pos, format!("unknown builtin `{name}`"))),
        }
    }
}

/// Entities compare by id, so a stored user id matches a user handle.
fn same_entity(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Object(o), Value::Str(s)) | (Value::Str(s), Value::Object(o)) => o.id() == Some(s.as_str()),
        _ => a.loose_eq(b),
    }
}

fn type_mismatch(op: &str, a: &Value, b: &Value, pos: Pos) -> EvalError {
    rt(pos, format!("unsupported operands for {op}: {} and {}", a.type_name(), b.type_name()))
}

fn normalize_index(i: i64, len: usize) -> Option<usize> {
    let idx = if i < 0 { len as i64 + i } else { i };
    if idx >= 0 && (idx as usize) < len {
        Some(idx as usize)
    } else {
        None
    }
}

fn index(o: Value, i: Value, pos: Pos) -> Result<Value, EvalError> {
    match (o, i) {
        (Value::List(items), Value::Int(n)) => {
            let len = items.len();
            normalize_index(n, len)
                .map(|idx| items[idx].clone())
                .ok_or_else(|| rt(pos, format!("index {n} out of range for list of length {len}")))
        }
        (Value::Map(m), Value::Str(k)) => m.get(&k).cloned().ok_or_else(|| rt(pos, format!("no key {k:?}"))),
        (Value::Map(m), Value::Object(o)) if o.id().is_some() => {
            let k = o.id().unwrap_or_default();
            m.get(k).cloned().ok_or_else(|| rt(pos, format!("no key {k:?}")))
        }
        (Value::Str(s), Value::Int(n)) => {
            let chars: Vec<char> = s.chars().collect();
            normalize_index(n, chars.len())
                .map(|idx| Value::Str(chars[idx].to_string()))
                .ok_or_else(|| rt(pos, format!("index {n} out of range")))
        }
        (o, i) => Err(rt(pos, format!("cannot index {} with {}", o.type_name(), i.type_name()))),
    }
}

fn native_method(recv: Value, method: &str, args: Vec<Value>, pos: Pos) -> Result<Value, EvalError> {
    let bad_args = || rt(pos, format!("bad arguments to `{method}`"));
    match (recv, method) {
        (Value::Str(s), "lower") if args.is_empty() => Ok(Value::Str(s.to_lowercase())),
        (Value::Str(s), "upper") if args.is_empty() => Ok(Value::Str(s.to_uppercase())),
        (Value::Str(s), "strip") if args.is_empty() => Ok(Value::Str(s.trim().to_string())),
        (Value::Str(s), "contains") => match args.as_slice() {
            [Value::Str(sub)] => Ok(Value::Bool(s.contains(sub.as_str()))),
            _ => Err(bad_args()),
        },
        (Value::Str(s), "startswith") => match args.as_slice() {
            [Value::Str(p)] => Ok(Value::Bool(s.starts_with(p.as_str()))),
            _ => Err(bad_args()),
        },
        (Value::Str(s), "endswith") => match args.as_slice() {
            [Value::Str(p)] => Ok(Value::Bool(s.ends_with(p.as_str()))),
            _ => Err(bad_args()),
        },
        (Value::Str(s), "replace") => match args.as_slice() {
            [Value::Str(a), Value::Str(b)] => Ok(Value::Str(s.replace(a.as_str(), b))),
            _ => Err(bad_args()),
        },
        (Value::Str(s), "split") => match args.as_slice() {
            [] => Ok(Value::List(s.split_whitespace().map(Value::str).collect())),
            [Value::Str(sep)] if !sep.is_empty() => {
                Ok(Value::List(s.split(sep.as_str()).map(Value::str).collect()))
            }
            _ => Err(bad_args()),
        },
        (Value::List(items), "contains") => match args.as_slice() {
            [x] => Ok(Value::Bool(items.iter().any(|i| same_entity(i, x)))),
            _ => Err(bad_args()),
        },
        (Value::List(items), "index") => match args.as_slice() {
            [x] => items
                .iter()
                .position(|i| same_entity(i, x))
                .map(|p| Value::Int(p as i64))
                .ok_or_else(|| rt(pos, "value not in list")),
            _ => Err(bad_args()),
        },
        (Value::Map(m), "get") => match args.as_slice() {
            [Value::Str(k)] => Ok(m.get(k).cloned().unwrap_or(Value::None)),
            [Value::Str(k), default] => Ok(m.get(k).cloned().unwrap_or_else(|| default.clone())),
            [Value::Object(o)] | [Value::Object(o), _] if o.id().is_some() => {
                let k = o.id().unwrap_or_default();
                Ok(m.get(k).cloned().or_else(|| args.get(1).cloned()).unwrap_or(Value::None))
            }
            _ => Err(bad_args()),
        },
        (Value::Map(m), "keys") if args.is_empty() => Ok(Value::List(m.into_keys().map(Value::Str).collect())),
        (Value::Map(m), "values") if args.is_empty() => Ok(Value::List(m.into_values().collect())),
        (Value::Map(m), "contains") => match args.as_slice() {
            [Value::Str(k)] => Ok(Value::Bool(m.contains_key(k))),
            _ => Err(bad_args()),
        },
        (recv, _) => Err(rt(pos, format!("{} has no method `{method}`", recv.type_name()))),
    }
}
