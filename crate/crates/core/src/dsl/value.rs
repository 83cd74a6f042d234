use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::ids::{ActionId, DocumentId, PolicyId, RoleId, UserId};
use crate::time::{Span, Timestamp};

/// Which free-form data store a `data` handle points at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum DataScope {
    Action(ActionId),
    Policy(PolicyId),
    /// Read-only profile attributes of a member.
    User(UserId),
}

/// Handle to a governance object owned by the host. Policies never hold the
/// objects themselves, only these references.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjRef {
    Action(ActionId),
    Proposal(ActionId),
    Policy(PolicyId),
    User(UserId),
    Role(RoleId),
    Document(DocumentId),
    Data(DataScope),
    Users,
    Roles,
    Documents,
    Policies,
}

impl ObjRef {
    pub fn class(&self) -> &'static str {
        match self {
            ObjRef::Action(_) => "action",
            ObjRef::Proposal(_) => "proposal",
            ObjRef::Policy(_) => "policy",
            ObjRef::User(_) => "user",
            ObjRef::Role(_) => "role",
            ObjRef::Document(_) => "document",
            ObjRef::Data(_) => "data",
            ObjRef::Users => "users",
            ObjRef::Roles => "roles",
            ObjRef::Documents => "documents",
            ObjRef::Policies => "policies",
        }
    }

    /// The identifier carried by the handle, if any.
    pub fn id(&self) -> Option<&str> {
        match self {
            ObjRef::Action(id) | ObjRef::Proposal(id) => Some(id.as_str()),
            ObjRef::Policy(id) => Some(id.as_str()),
            ObjRef::User(id) => Some(id.as_str()),
            ObjRef::Role(id) => Some(id.as_str()),
            ObjRef::Document(id) => Some(id.as_str()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    Duration(Span),
    Time(Timestamp),
    Object(ObjRef),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::None => "none",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
            Value::Duration(_) => "duration",
            Value::Time(_) => "time",
            Value::Object(o) => o.class(),
        }
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::None => false,
            Value::Bool(b) => *b,
            Value::Int(n) => *n != 0,
            Value::Float(x) => *x != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::List(l) => !l.is_empty(),
            Value::Map(m) => !m.is_empty(),
            Value::Duration(d) => d.as_millis() != 0,
            Value::Time(_) | Value::Object(_) => true,
        }
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    /// Structural equality with numeric coercion between int and float.
    pub fn loose_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => (*a as f64) == *b,
            (Value::List(a), Value::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.loose_eq(y))
            }
            (Value::Map(a), Value::Map(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.loose_eq(vb))
            }
            _ => self == other,
        }
    }

    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Int(a), Value::Float(b)) => (*a as f64).partial_cmp(b),
            (Value::Float(a), Value::Int(b)) => a.partial_cmp(&(*b as f64)),
            (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::Duration(a), Value::Duration(b)) => Some(a.cmp(b)),
            (Value::Time(a), Value::Time(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::None => f.write_str("none"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(n) => write!(f, "{n}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            Value::Map(m) => {
                f.write_str("{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
            Value::Duration(d) => write!(f, "{d}"),
            Value::Time(t) => write!(f, "{t}"),
            Value::Object(o) => match o.id() {
                Some(id) => f.write_str(id),
                None => write!(f, "<{}>", o.class()),
            },
        }
    }
}

/// Converts a policy value into JSON for storage in a data store.
/// Object handles collapse to their id; durations to milliseconds; times to
/// RFC 3339 strings.
pub fn value_to_json(v: &Value) -> Result<serde_json::Value, String> {
    use serde_json::Value as J;
    Ok(match v {
        Value::None => J::Null,
        Value::Bool(b) => J::Bool(*b),
        Value::Int(n) => J::from(*n),
        Value::Float(x) => serde_json::Number::from_f64(*x)
            .map(J::Number)
            .ok_or_else(|| format!("cannot store non-finite number {x}"))?,
        Value::Str(s) => J::String(s.clone()),
        Value::List(items) => J::Array(items.iter().map(value_to_json).collect::<Result<_, _>>()?),
        Value::Map(m) => {
            let mut out = serde_json::Map::new();
            for (k, v) in m {
                out.insert(k.clone(), value_to_json(v)?);
            }
            J::Object(out)
        }
        Value::Duration(d) => J::from(d.as_millis()),
        Value::Time(t) => J::String(t.to_rfc3339()),
        Value::Object(o) => match o.id() {
            Some(id) => J::String(id.to_string()),
            None => return Err(format!("cannot store a `{}` handle", o.class())),
        },
    })
}

pub fn json_to_value(j: &serde_json::Value) -> Value {
    use serde_json::Value as J;
    match j {
        J::Null => Value::None,
        J::Bool(b) => Value::Bool(*b),
        J::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
        },
        J::String(s) => Value::Str(s.clone()),
        J::Array(items) => Value::List(items.iter().map(json_to_value).collect()),
        J::Object(m) => Value::Map(m.iter().map(|(k, v)| (k.clone(), json_to_value(v))).collect()),
    }
}
