//! The policy language: a small brace-delimited, dynamically typed language
//! in which the six lifecycle functions of a policy are written.
//!
//! Programs are parsed once into a [`PolicyProgram`], statically checked for
//! unknown identifiers, and evaluated against a [`Host`] that exposes the
//! governance objects (`action`, `policy`, `users`, ...). Every host call is
//! mediated by the host, which is where capabilities are enforced.

mod ast;
mod interp;
mod lexer;
mod parser;
mod resolve;
mod value;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub use ast::Pos;
pub use interp::{evaluate, EvalError, ExecutionBudget, Host, HostError};
pub use value::{json_to_value, value_to_json, DataScope, ObjRef, Value};

use crate::error::{ErrorCode, FieldError, GovError};

/// The six entry points every policy defines.
pub const LIFECYCLE: [&str; 6] = ["filter", "initialize", "check", "notify", "pass", "fail"];

/// Names bound by the sandbox in every evaluation.
pub const HOST_GLOBALS: &[&str] = &[
    "action", "policy", "proposal", "bundle", "users", "roles", "documents", "policies", "PASSED",
    "FAILED", "PROPOSED",
];

/// Host functions callable by name. Capability checks happen in the host.
pub const HOST_FUNCTIONS: &[&str] = &[
    "days",
    "hours",
    "minutes",
    "now",
    "notify_users",
    "random_sample",
    "http_fetch",
    "propose_action",
    "log",
];

/// Pure language builtins; these never count against the host-call budget.
pub const BUILTINS: &[&str] = &[
    "len", "str", "int", "float", "range", "contains", "keys", "min", "max", "abs", "sorted",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub pos: Pos,
    pub message: String,
}

impl SyntaxError {
    pub(crate) fn new(pos: Pos, message: impl Into<String>) -> Self {
        SyntaxError { pos, message: message.into() }
    }
}

/// Failure to turn source text into a [`PolicyProgram`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    Syntax(SyntaxError),
    MissingFunction(Vec<String>),
    UnknownIdentifier { name: String, pos: Pos },
}

impl ParseError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ParseError::Syntax(_) => ErrorCode::SyntaxError,
            ParseError::MissingFunction(_) => ErrorCode::MissingFunction,
            ParseError::UnknownIdentifier { .. } => ErrorCode::UnknownIdentifier,
        }
    }

    pub fn pos(&self) -> Option<Pos> {
        match self {
            ParseError::Syntax(e) => Some(e.pos),
            ParseError::MissingFunction(_) => None,
            ParseError::UnknownIdentifier { pos, .. } => Some(*pos),
        }
    }

    /// Express the error as a field error on `field` (used for payload validation).
    pub fn to_field_error(&self, field: &str) -> FieldError {
        let mut fe = FieldError::new(field, self.to_string());
        if let Some(pos) = self.pos() {
            fe.line = Some(pos.line);
            fe.column = Some(pos.col);
        }
        fe
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Syntax(e) => write!(f, "{}:{}: {}", e.pos.line, e.pos.col, e.message),
            ParseError::MissingFunction(names) => {
                write!(f, "missing function(s): {}", names.join(", "))
            }
            ParseError::UnknownIdentifier { name, pos } => {
                write!(f, "{}:{}: unknown identifier `{name}`", pos.line, pos.col)
            }
        }
    }
}

impl From<ParseError> for GovError {
    fn from(e: ParseError) -> Self {
        let fe = e.to_field_error("source");
        GovError::new(e.code(), e.to_string()).with_fields(alloc::vec![fe])
    }
}

/// A parsed, statically checked policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyProgram {
    pub source: String,
    pub description: String,
    functions: BTreeMap<String, ast::FnDef>,
}

impl PolicyProgram {
    pub fn function_names(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }

    pub(crate) fn function(&self, name: &str) -> Option<&ast::FnDef> {
        self.functions.get(name)
    }

    pub fn is_empty_body(&self, name: &str) -> bool {
        self.functions.get(name).is_some_and(|f| f.body.is_empty())
    }

    /// A policy whose `pass` and `fail` are both empty only observes:
    /// outcomes are recorded as hypothetical.
    pub fn is_trial(&self) -> bool {
        self.is_empty_body("pass") && self.is_empty_body("fail")
    }

    /// Call sites inside lifecycle function `name`, in source order. Method
    /// calls are reported with a leading dot (`.execute`).
    pub fn calls_in(&self, name: &str) -> Vec<(String, Pos)> {
        let mut out = Vec::new();
        if let Some(f) = self.functions.get(name) {
            resolve::collect_calls(&f.body, &mut out);
        }
        out
    }

    /// Every string literal in the source; used to detect policies that
    /// reference a role or document by name.
    pub fn string_literals(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for f in self.functions.values() {
            resolve::collect_strings(&f.body, &mut out);
        }
        out
    }
}

/// Parses policy source. The first line, if it is a comment of the form
/// `# description: ...`, becomes the description.
pub fn parse_policy_source(source: &str) -> Result<PolicyProgram, ParseError> {
    let toks = lexer::tokenize(source).map_err(ParseError::Syntax)?;
    let defs = parser::Parser::new(toks).program().map_err(ParseError::Syntax)?;

    let mut functions = BTreeMap::new();
    for def in defs {
        if functions.contains_key(&def.name) {
            return Err(ParseError::Syntax(SyntaxError::new(
                def.pos,
                format!("function `{}` defined twice", def.name),
            )));
        }
        if HOST_GLOBALS.contains(&def.name.as_str())
            || HOST_FUNCTIONS.contains(&def.name.as_str())
            || BUILTINS.contains(&def.name.as_str())
        {
            return Err(ParseError::Syntax(SyntaxError::new(
                def.pos,
                format!("function name `{}` shadows a built-in", def.name),
            )));
        }
        functions.insert(def.name.clone(), def);
    }

    let missing: Vec<String> = LIFECYCLE
        .iter()
        .filter(|n| !functions.contains_key(**n))
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::MissingFunction(missing));
    }

    resolve::check_identifiers(&functions)?;

    Ok(PolicyProgram {
        source: source.to_string(),
        description: extract_description(source),
        functions,
    })
}

fn extract_description(source: &str) -> String {
    source
        .lines()
        .next()
        .and_then(|l| l.trim().strip_prefix('#'))
        .and_then(|l| l.trim().strip_prefix("description:"))
        .map(|d| d.trim().to_string())
        .unwrap_or_default()
}
