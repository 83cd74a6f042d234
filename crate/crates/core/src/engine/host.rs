//! The binding surface policies see. Reads go straight to a borrowed view
//! of engine state; writes are collected as [`Effect`]s and applied by the
//! engine after the evaluation returns.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use super::{EngineState, Io};
use crate::dsl::{json_to_value, value_to_json, DataScope, Host, HostError, ObjRef, Value};
use crate::error::ErrorCode;
use crate::ids::*;
use crate::model::*;
use crate::platform::VoteKind;
use crate::time::{Span, Timestamp};

/// Largest `http_fetch` response a policy may receive.
pub const MAX_FETCH_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Capability {
    Notify,
    ExecuteAction,
    RevertAction,
    HttpFetch,
    Random,
    Clock,
    DataRw,
    ProposeAction,
}

impl Capability {
    const fn bit(self) -> u16 {
        1 << self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            Capability::Notify => "NOTIFY",
            Capability::ExecuteAction => "EXECUTE_ACTION",
            Capability::RevertAction => "REVERT_ACTION",
            Capability::HttpFetch => "HTTP_FETCH",
            Capability::Random => "RANDOM",
            Capability::Clock => "CLOCK",
            Capability::DataRw => "DATA_RW",
            Capability::ProposeAction => "PROPOSE_ACTION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct Caps(u16);

impl Caps {
    pub fn of(list: &[Capability]) -> Caps {
        Caps(list.iter().fold(0, |acc, c| acc | c.bit()))
    }
    pub fn has(self, c: Capability) -> bool {
        self.0 & c.bit() != 0
    }
    pub fn without(self, c: Capability) -> Caps {
        Caps(self.0 & !c.bit())
    }

    /// Capabilities granted to each lifecycle function. `HTTP_FETCH` is
    /// removed separately when the community allow-list is empty.
    pub fn for_function(name: &str) -> Caps {
        use Capability::*;
        match name {
            "filter" => Caps::of(&[Clock, HttpFetch]),
            "initialize" | "check" | "notify" => Caps::of(&[Clock, HttpFetch, Notify, Random, DataRw]),
            _ => Caps::of(&[Clock, HttpFetch, Notify, Random, DataRw, ExecuteAction, RevertAction, ProposeAction]),
        }
    }
}

/// The capability a call needs, when the callee name alone decides it.
/// Method names carry a leading dot, as reported by `PolicyProgram::calls_in`.
pub fn capability_of_call(callee: &str) -> Option<Capability> {
    Some(match callee {
        "notify_users" => Capability::Notify,
        "random_sample" => Capability::Random,
        "http_fetch" => Capability::HttpFetch,
        "propose_action" => Capability::ProposeAction,
        "now" => Capability::Clock,
        ".execute" => Capability::ExecuteAction,
        ".revert" => Capability::RevertAction,
        ".set" | ".remove" => Capability::DataRw,
        _ => return None,
    })
}

/// Calls that would be refused at run time because the lifecycle function
/// lacks the capability: `(function, callee, position, capability)`.
pub fn capability_violations(prog: &crate::dsl::PolicyProgram) -> Vec<(String, String, crate::dsl::Pos, Capability)> {
    let mut out = Vec::new();
    for f in crate::dsl::LIFECYCLE {
        let caps = Caps::for_function(f);
        for (callee, pos) in prog.calls_in(f) {
            if let Some(c) = capability_of_call(&callee) {
                if !caps.has(c) {
                    out.push((f.to_string(), callee, pos, c));
                }
            }
        }
    }
    out
}

/// A state change requested by a policy function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    Notify { users: Vec<UserId>, text: String, vote_kind: VoteKind, options: Vec<String> },
    Execute { action: ActionId },
    Revert { action: ActionId },
    DataWrite { scope: String, owner: String, key: String, value: Json },
    Propose { action: ActionId, action_type: String, payload: Map<String, Json>, execute: bool },
    BundleRemove { bundle: ActionId, member: ActionId },
    Log { text: String },
}

pub(crate) struct SandboxHost<'a> {
    pub st: &'a EngineState,
    pub io: &'a mut Io,
    pub action: &'a Action,
    pub policy: &'a Policy,
    pub caps: Caps,
    pub now: Timestamp,
    pub stage_started_at: Timestamp,
    pub effects: Vec<Effect>,
    overlay: BTreeMap<DataScope, DataStore>,
    /// Bundle members after removals made during this evaluation.
    members: Option<Vec<ActionId>>,
    proposed: Vec<Action>,
    next_action: u64,
    rng: Option<ChaCha8Rng>,
    started_ms: u64,
}

fn rt(msg: impl Into<String>) -> HostError {
    HostError::runtime(msg)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-action RNG seed: community seed XOR a hash of the action id.
pub fn action_seed(community_seed: u64, action: &ActionId) -> u64 {
    community_seed ^ fnv1a(action.as_str())
}

fn status_str(s: ProposalStatus) -> Value {
    Value::str(s.as_str())
}

fn layer_str(l: Layer) -> Value {
    Value::str(l.as_str())
}

fn user_obj(id: &UserId) -> Value {
    Value::Object(ObjRef::User(id.clone()))
}

impl<'a> SandboxHost<'a> {
    pub fn new(
        st: &'a EngineState,
        io: &'a mut Io,
        action: &'a Action,
        policy: &'a Policy,
        caps: Caps,
        stage_started_at: Timestamp,
    ) -> Self {
        let started_ms = io.stopwatch.as_ref().map_or(0, |s| s.elapsed_ms());
        SandboxHost {
            now: st.clock,
            next_action: st.next_action,
            st,
            io,
            action,
            policy,
            caps,
            stage_started_at,
            effects: Vec::new(),
            overlay: BTreeMap::new(),
            members: None,
            proposed: Vec::new(),
            rng: None,
            started_ms,
        }
    }

    pub fn into_effects(self) -> Vec<Effect> {
        self.effects
    }

    fn require(&self, c: Capability, what: &str) -> Result<(), HostError> {
        if self.caps.has(c) {
            Ok(())
        } else {
            Err(HostError::denied(c.name(), what))
        }
    }

    fn find_action(&self, id: &ActionId) -> Result<&Action, HostError> {
        self.st
            .action(id)
            .or_else(|| self.proposed.iter().find(|a| &a.id == id))
            .filter(|a| a.is_active(self.now) || a.member_of.is_some())
            .ok_or_else(|| rt(format!("no visible action {id}")))
    }

    fn bundle_members(&self, bundle: &Action) -> Vec<ActionId> {
        if bundle.id == self.action.id {
            if let Some(m) = &self.members {
                return m.clone();
            }
        }
        bundle.bundle.as_ref().map(|b| b.members.clone()).unwrap_or_default()
    }

    fn user(&self, id: &UserId) -> Result<&User, HostError> {
        self.st.community.users.get(id).ok_or_else(|| rt(format!("no user {id}")))
    }

    fn store(&self, scope: &DataScope) -> Result<DataStore, HostError> {
        if let Some(s) = self.overlay.get(scope) {
            return Ok(s.clone());
        }
        Ok(match scope {
            DataScope::Action(id) => self.find_action(id)?.data.clone(),
            DataScope::Policy(id) => {
                self.st.policy(id).map(|p| p.data.clone()).ok_or_else(|| rt(format!("no policy {id}")))?
            }
            DataScope::User(id) => self.user(id)?.attributes.clone(),
        })
    }

    /// Resolves a list-like argument (list of users/ids, `users`, a role) to user ids.
    fn user_list(&self, v: &Value) -> Result<Vec<UserId>, HostError> {
        let mut out = Vec::new();
        match v {
            Value::Object(ObjRef::Users) => out.extend(self.st.community.members.iter().cloned()),
            Value::Object(ObjRef::Role(r)) => {
                let role = self.st.community.roles.get(r).ok_or_else(|| rt(format!("no role {r}")))?;
                out.extend(role.members.iter().cloned());
            }
            Value::Object(ObjRef::User(u)) => out.push(u.clone()),
            Value::Str(s) => out.push(UserId::from(s.as_str())),
            Value::List(items) => {
                for i in items {
                    match i {
                        Value::Object(ObjRef::User(u)) => out.push(u.clone()),
                        Value::Str(s) => out.push(UserId::from(s.as_str())),
                        other => return Err(rt(format!("expected users, found {}", other.type_name()))),
                    }
                }
            }
            Value::None => {}
            other => return Err(rt(format!("expected a list of users, found {}", other.type_name()))),
        }
        Ok(out)
    }

    fn votes_matching(
        &self,
        id: &ActionId,
        args: &[Value],
        kwargs: &[(String, Value)],
        first_arg_is_filter: bool,
        pred: impl Fn(&VoteValue) -> bool,
    ) -> Result<Value, HostError> {
        let a = self.find_action(id)?;
        let filter = kwargs
            .iter()
            .find(|(k, _)| k == "users")
            .map(|(_, v)| v)
            .or(if first_arg_is_filter { args.first() } else { args.get(1) });
        let allowed = match filter {
            Some(v) if !matches!(v, Value::None) => Some(self.user_list(v)?),
            _ => None,
        };
        let mut voters: Vec<&UserId> = a
            .proposal
            .votes
            .iter()
            .filter(|v| pred(&v.value))
            .filter(|v| allowed.as_ref().is_none_or(|al| al.contains(&v.voter)))
            .map(|v| &v.voter)
            .collect();
        voters.sort();
        Ok(Value::List(voters.into_iter().map(user_obj).collect()))
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        let seed = action_seed(self.st.community.rng_seed, &self.action.id);
        self.rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(seed))
    }

    fn duration(name: &str, args: &[Value], unit: Span) -> Result<Value, HostError> {
        let ms = unit.as_millis() as f64;
        let n = match args {
            [Value::Int(n)] => *n as f64,
            [Value::Float(x)] => *x,
            _ => return Err(rt(format!("{name}(n) takes one number"))),
        };
        let total = n * ms;
        if !total.is_finite() || total.abs() > 1e15 {
            return Err(rt(format!("{name}({n}) is out of range")));
        }
        Ok(Value::Duration(Span::from_millis(total as i64)))
    }

    fn render(&self, template: &str) -> String {
        let a = self.action;
        let mut out = template
            .replace("{action_type}", &a.action_type)
            .replace("{action}", a.id.as_str())
            .replace("{initiator}", a.initiator.as_str())
            .replace("{policy}", &self.policy.name);
        for (k, v) in &a.payload {
            let needle = format!("{{payload.{k}}}");
            if out.contains(&needle) {
                let s = match v {
                    Json::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out = out.replace(&needle, &s);
            }
        }
        out
    }

    fn describe(&self, a: &Action) -> String {
        let fields = a
            .payload
            .iter()
            .map(|(k, v)| match v {
                Json::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect::<Vec<_>>()
            .join(", ");
        format!("{} ({fields})", a.action_type)
    }

    fn notify_users(&mut self, args: Vec<Value>, kwargs: Vec<(String, Value)>) -> Result<Value, HostError> {
        self.require(Capability::Notify, "notify_users")?;
        let mut args = args.into_iter();
        let users = args.next().ok_or_else(|| rt("notify_users(users, text, vote_kind?, options?)"))?;
        let text = match args.next() {
            Some(Value::Str(s)) => s,
            _ => return Err(rt("notify_users: text must be a string")),
        };
        let mut kind = args.next();
        let mut options = args.next();
        for (k, v) in kwargs {
            match k.as_str() {
                "vote_kind" => kind = Some(v),
                "options" => options = Some(v),
                other => return Err(rt(format!("notify_users has no argument `{other}`"))),
            }
        }
        let vote_kind = match kind {
            None | Some(Value::None) => VoteKind::None,
            Some(Value::Str(s)) => match s.to_lowercase().as_str() {
                "none" => VoteKind::None,
                "boolean" | "yesno" => VoteKind::Boolean,
                "choice" => VoteKind::Choice,
                other => return Err(rt(format!("unknown vote kind `{other}`"))),
            },
            Some(v) => return Err(rt(format!("vote kind must be a string, found {}", v.type_name()))),
        };
        let options = match options {
            Some(Value::List(items)) => items.iter().map(|i| i.to_string()).collect(),
            Some(Value::None) | None if vote_kind == VoteKind::Choice => {
                let members = self.bundle_members(self.action);
                let mut opts = Vec::new();
                for m in &members {
                    opts.push(self.describe(self.find_action(m)?));
                }
                opts
            }
            Some(Value::None) | None => Vec::new(),
            Some(v) => return Err(rt(format!("options must be a list, found {}", v.type_name()))),
        };
        if vote_kind == VoteKind::Choice && options.is_empty() {
            return Err(rt("a choice vote needs options"));
        }
        let mut recipients = Vec::new();
        for u in self.user_list(&users)? {
            if !self.st.community.is_member(&u) {
                return Err(rt(format!("{u} is not a member")));
            }
            if !recipients.contains(&u) {
                recipients.push(u);
            }
        }
        let text = self.render(&text);
        let n = recipients.len();
        self.effects.push(Effect::Notify { users: recipients, text, vote_kind, options });
        Ok(Value::Int(n as i64))
    }

    fn random_sample(&mut self, args: Vec<Value>) -> Result<Value, HostError> {
        self.require(Capability::Random, "random_sample")?;
        let (pool, k) = match args.as_slice() {
            [Value::List(items), Value::Int(k)] => (items.clone(), *k),
            [obj @ Value::Object(ObjRef::Users | ObjRef::Role(_)), Value::Int(k)] => {
                (self.user_list(obj)?.iter().map(user_obj).collect(), *k)
            }
            _ => return Err(rt("random_sample(list, k)")),
        };
        if k < 0 || k as usize > pool.len() {
            return Err(rt(format!("cannot sample {k} from {} items", pool.len())));
        }
        let idx = sample(self.rng(), pool.len(), k as usize);
        Ok(Value::List(idx.into_iter().map(|i| pool[i].clone()).collect()))
    }

    fn http_fetch(&mut self, args: Vec<Value>) -> Result<Value, HostError> {
        self.require(Capability::HttpFetch, "http_fetch")?;
        let (url, query) = match args.as_slice() {
            [Value::Str(u)] => (u.clone(), BTreeMap::new()),
            [Value::Str(u), Value::Map(q)] => {
                let mut qs = BTreeMap::new();
                for (k, v) in q {
                    qs.insert(k.clone(), v.to_string());
                }
                (u.clone(), qs)
            }
            _ => return Err(rt("http_fetch(url, query_map)")),
        };
        let allow = &self.st.community.config.http_allowlist;
        if !allow.iter().any(|p| url.starts_with(p.as_str())) {
            return Err(HostError::new(
                ErrorCode::CapabilityDenied,
                format!("HTTP_FETCH: `{url}` is not on the community allow-list"),
            ));
        }
        let now = self.now;
        let action = self.action.id.clone();
        let res = self.io.external(now, "http_fetch", Some(&action), |io| match io.fetcher.as_mut() {
            Some(f) => f.fetch(&url, &query),
            None => Err(crate::error::GovError::new(ErrorCode::CapabilityDenied, "no fetcher configured")),
        });
        let doc = res.map_err(|e| HostError::new(e.code, e.message))?;
        let size = serde_json::to_vec(&doc).map(|v| v.len()).unwrap_or(usize::MAX);
        if size > MAX_FETCH_BYTES {
            return Err(rt(format!("response of {size} bytes exceeds {MAX_FETCH_BYTES}")));
        }
        Ok(json_to_value(&doc))
    }

    fn propose_action(&mut self, args: Vec<Value>) -> Result<Value, HostError> {
        self.require(Capability::ProposeAction, "propose_action")?;
        let (action_type, payload) = match args.as_slice() {
            [Value::Str(t)] => (t.clone(), Map::new()),
            [Value::Str(t), p @ Value::Map(_)] => match value_to_json(p).map_err(rt)? {
                Json::Object(m) => (t.clone(), m),
                _ => unreachable!("maps convert to objects"),
            },
            _ => return Err(rt("propose_action(action_type, payload)")),
        };
        let c = &self.st.community;
        let layer = c.action_layer(&action_type).map_err(|e| HostError::new(e.code, e.message))?;
        let errors = if crate::catalog::is_constitution_type(&action_type) {
            crate::catalog::validate_payload(c, &action_type, &payload)
        } else {
            self.io.platform.descriptor().validate_payload(&action_type, &payload)
        };
        if let Some(e) = errors.first() {
            return Err(HostError::new(
                ErrorCode::SchemaViolation,
                format!("{action_type}: {}: {}", e.field, e.message),
            ));
        }
        let id = ActionId(format!("a-{}", self.next_action));
        self.next_action += 1;
        self.proposed.push(Action {
            id: id.clone(),
            action_type: action_type.clone(),
            layer,
            initiator: self.action.initiator.clone(),
            payload: payload.clone(),
            proposal: Proposal::new(self.now),
            data: DataStore::default(),
            datetime_trigger: None,
            origin: Origin::PolicyGenerated,
            bundle: None,
            member_of: None,
            in_effect: false,
            undo: None,
        });
        self.effects.push(Effect::Propose { action: id.clone(), action_type, payload, execute: false });
        Ok(Value::Object(ObjRef::Action(id)))
    }

    fn action_method(&mut self, id: &ActionId, name: &str, args: Vec<Value>) -> Result<Value, HostError> {
        match name {
            "execute" | "revert" => {
                if !args.is_empty() {
                    return Err(rt(format!("{name}() takes no arguments")));
                }
                let cap = if name == "execute" { Capability::ExecuteAction } else { Capability::RevertAction };
                self.require(cap, &format!("action.{name}"))?;
                let reachable = id == &self.action.id
                    || self.bundle_members(self.action).contains(id)
                    || self.proposed.iter().any(|a| &a.id == id);
                if !reachable {
                    return Err(rt(format!("{id} is not the action under evaluation")));
                }
                if name == "execute" {
                    for e in self.effects.iter_mut() {
                        if let Effect::Propose { action, execute, .. } = e {
                            if action == id {
                                *execute = true;
                                return Ok(Value::None);
                            }
                        }
                    }
                    self.effects.push(Effect::Execute { action: id.clone() });
                } else {
                    self.effects.push(Effect::Revert { action: id.clone() });
                }
                Ok(Value::None)
            }
            "members" => {
                let a = self.find_action(id)?;
                if a.bundle.is_none() {
                    return Err(rt(format!("{id} is not a bundle")));
                }
                let m = self.bundle_members(a);
                Ok(Value::List(m.into_iter().map(|m| Value::Object(ObjRef::Action(m))).collect()))
            }
            "remove" => {
                self.require(Capability::DataRw, "bundle.remove")?;
                if id != &self.action.id || self.action.bundle.is_none() {
                    return Err(rt("only the bundle under evaluation can drop members"));
                }
                let mut members = self.bundle_members(self.action);
                let target = match args.as_slice() {
                    [Value::Object(ObjRef::Action(m))] => m.clone(),
                    [Value::Int(n)] if *n >= 1 && (*n as usize) <= members.len() => members[*n as usize - 1].clone(),
                    _ => return Err(rt("bundle.remove(member or option number)")),
                };
                let pos = members.iter().position(|m| *m == target).ok_or_else(|| rt(format!("{target} is not a member")))?;
                members.remove(pos);
                self.members = Some(members);
                self.effects.push(Effect::BundleRemove { bundle: id.clone(), member: target });
                Ok(Value::None)
            }
            other => Err(rt(format!("action has no method `{other}`"))),
        }
    }

    fn data_method(&mut self, scope: &DataScope, name: &str, args: Vec<Value>) -> Result<Value, HostError> {
        match name {
            "get" => {
                let store = self.store(scope)?;
                match args.as_slice() {
                    [Value::Str(k)] => Ok(store.get(k).map(json_to_value).unwrap_or(Value::None)),
                    [Value::Str(k), d] => Ok(store.get(k).map(json_to_value).unwrap_or_else(|| d.clone())),
                    _ => Err(rt("data.get(key, default?)")),
                }
            }
            "contains" => match args.as_slice() {
                [Value::Str(k)] => Ok(Value::Bool(self.store(scope)?.get(k).is_some())),
                _ => Err(rt("data.contains(key)")),
            },
            "keys" => Ok(Value::List(self.store(scope)?.0.keys().map(|k| Value::str(k.as_str())).collect())),
            "set" => {
                self.require(Capability::DataRw, "data.set")?;
                let (owner, scope_name) = match scope {
                    DataScope::Action(a) if a == &self.action.id => (a.to_string(), "action"),
                    DataScope::Policy(p) if p == &self.policy.id => (p.to_string(), "policy"),
                    _ => return Err(HostError::denied("DATA_RW", "writing another object's data")),
                };
                let (key, value) = match args.as_slice() {
                    [Value::Str(k), v] => (k.clone(), value_to_json(v).map_err(rt)?),
                    _ => return Err(rt("data.set(key, value)")),
                };
                let mut store = self.store(scope)?;
                store
                    .set(key.clone(), value.clone())
                    .map_err(|e| HostError::new(ErrorCode::RuntimeError, e.message))?;
                self.overlay.insert(scope.clone(), store);
                self.effects.push(Effect::DataWrite { scope: scope_name.to_string(), owner, key, value });
                Ok(Value::None)
            }
            other => Err(rt(format!("data has no method `{other}`"))),
        }
    }

    fn users_filter(&self, kwargs: &[(String, Value)]) -> Result<Value, HostError> {
        let c = &self.st.community;
        let mut ids: Vec<&UserId> = c.members.iter().collect();
        for (k, v) in kwargs {
            match (k.as_str(), v) {
                ("role", Value::Str(r)) => {
                    let role = c.roles.get(&RoleId::from(r.as_str())).ok_or_else(|| rt(format!("no role `{r}`")))?;
                    ids.retain(|u| role.members.contains(*u));
                }
                ("role", Value::Object(ObjRef::Role(r))) => {
                    let role = c.roles.get(r).ok_or_else(|| rt(format!("no role `{r}`")))?;
                    ids.retain(|u| role.members.contains(*u));
                }
                ("min_data", Value::Map(m)) => {
                    for (key, min) in m {
                        let min = match min {
                            Value::Int(n) => *n as f64,
                            Value::Float(x) => *x,
                            _ => return Err(rt("min_data values must be numbers")),
                        };
                        ids.retain(|u| {
                            c.users
                                .get(*u)
                                .and_then(|usr| usr.attributes.get(key))
                                .and_then(Json::as_f64)
                                .is_some_and(|x| x >= min)
                        });
                    }
                }
                (other, _) => return Err(rt(format!("users.filter has no argument `{other}`"))),
            }
        }
        Ok(Value::List(ids.into_iter().map(user_obj).collect()))
    }

    fn deadline(&self) -> bool {
        match self.io.stopwatch.as_ref() {
            Some(s) => {
                let wall = self.io.budget.wall_timeout.as_millis().max(0) as u64;
                s.elapsed_ms().saturating_sub(self.started_ms) >= wall
            }
            None => false,
        }
    }
}

impl Host for SandboxHost<'_> {
    fn global(&mut self, name: &str) -> Option<Value> {
        Some(match name {
            "action" => Value::Object(ObjRef::Action(self.action.id.clone())),
            "policy" => Value::Object(ObjRef::Policy(self.policy.id.clone())),
            "proposal" => Value::Object(ObjRef::Proposal(self.action.id.clone())),
            "bundle" => match self.action.bundle {
                Some(_) => Value::Object(ObjRef::Action(self.action.id.clone())),
                None => Value::None,
            },
            "users" => Value::Object(ObjRef::Users),
            "roles" => Value::Object(ObjRef::Roles),
            "documents" => Value::Object(ObjRef::Documents),
            "policies" => Value::Object(ObjRef::Policies),
            "PASSED" | "FAILED" | "PROPOSED" => Value::str(name),
            _ => return None,
        })
    }

    fn attr(&mut self, obj: &ObjRef, name: &str) -> Result<Value, HostError> {
        let c = &self.st.community;
        match obj {
            ObjRef::Action(id) => {
                let a = self.find_action(id)?;
                Ok(match name {
                    "id" => Value::str(a.id.as_str()),
                    "action_type" => Value::str(a.action_type.as_str()),
                    "layer" => layer_str(a.layer),
                    "initiator" => user_obj(&a.initiator),
                    "payload" => json_to_value(&Json::Object(a.payload.clone())),
                    "data" => Value::Object(ObjRef::Data(DataScope::Action(a.id.clone()))),
                    "proposal" => Value::Object(ObjRef::Proposal(a.id.clone())),
                    "status" => status_str(a.proposal.status),
                    "origin" => Value::str(match a.origin {
                        Origin::PlatformEvent => "PLATFORM_EVENT",
                        Origin::WebProposal => "WEB_PROPOSAL",
                        Origin::PolicyGenerated => "POLICY_GENERATED",
                    }),
                    "is_bundle" => Value::Bool(a.bundle.is_some()),
                    "kind" => match &a.bundle {
                        Some(b) => Value::str(match b.kind {
                            BundleKind::Election => "ELECTION",
                            BundleKind::Combination => "COMBINATION",
                        }),
                        None => Value::None,
                    },
                    "created_at" => Value::Time(a.proposal.created_at),
                    "datetime_trigger" => a.datetime_trigger.map_or(Value::None, Value::Time),
                    "in_effect" => Value::Bool(a.in_effect),
                    "members" => Value::List(
                        self.bundle_members(a).into_iter().map(|m| Value::Object(ObjRef::Action(m))).collect(),
                    ),
                    "member_of" => a.member_of.clone().map_or(Value::None, |b| Value::Object(ObjRef::Action(b))),
                    other => return Err(rt(format!("action has no attribute `{other}`"))),
                })
            }
            ObjRef::Proposal(id) => {
                let a = self.find_action(id)?;
                let p = &a.proposal;
                Ok(match name {
                    "status" => status_str(p.status),
                    "created_at" => Value::Time(p.created_at),
                    "decided_at" => p.decided_at.map_or(Value::None, Value::Time),
                    "governing_policy" => {
                        p.governing_policy.as_ref().map_or(Value::None, |g| Value::Object(ObjRef::Policy(g.clone())))
                    }
                    "votes" => Value::List(
                        p.votes
                            .iter()
                            .map(|v| {
                                let mut m = BTreeMap::new();
                                m.insert("voter".to_string(), user_obj(&v.voter));
                                m.insert(
                                    "value".to_string(),
                                    match v.value {
                                        VoteValue::Boolean(b) => Value::Bool(b),
                                        VoteValue::Choice(n) => Value::Int(n as i64),
                                    },
                                );
                                Value::Map(m)
                            })
                            .collect(),
                    ),
                    other => return Err(rt(format!("proposal has no attribute `{other}`"))),
                })
            }
            ObjRef::Policy(id) => {
                let p = self.st.policy(id).ok_or_else(|| rt(format!("no policy {id}")))?;
                Ok(match name {
                    "id" => Value::str(p.id.as_str()),
                    "name" => Value::str(p.name.as_str()),
                    "description" => Value::str(p.description.as_str()),
                    "precedence" => Value::Int(p.precedence),
                    "layer" => layer_str(p.layer),
                    "trial_mode" => Value::Bool(p.trial_mode),
                    "data" => Value::Object(ObjRef::Data(DataScope::Policy(p.id.clone()))),
                    other => return Err(rt(format!("policy has no attribute `{other}`"))),
                })
            }
            ObjRef::User(id) => {
                let u = self.user(id)?;
                Ok(match name {
                    "id" => Value::str(u.id.as_str()),
                    "display_name" => Value::str(u.display_name.as_str()),
                    "handle" | "platform_handle" => Value::str(u.platform_handle.as_str()),
                    "data" | "attributes" => Value::Object(ObjRef::Data(DataScope::User(u.id.clone()))),
                    "roles" => Value::List(c.roles_of(id).map(|r| Value::str(r.name.as_str())).collect()),
                    other => return Err(rt(format!("user has no attribute `{other}`"))),
                })
            }
            ObjRef::Role(id) => {
                let r = c.roles.get(id).ok_or_else(|| rt(format!("no role {id}")))?;
                Ok(match name {
                    "id" | "name" => Value::str(r.name.as_str()),
                    "members" => Value::List(r.members.iter().map(user_obj).collect()),
                    other => return Err(rt(format!("role has no attribute `{other}`"))),
                })
            }
            ObjRef::Document(id) => {
                let d = c.document(id).ok_or_else(|| rt(format!("no document {id}")))?;
                Ok(match name {
                    "id" => Value::str(d.id.as_str()),
                    "title" => Value::str(d.title.as_str()),
                    "body" => Value::str(d.body.as_str()),
                    "version" => Value::Int(d.version as i64),
                    other => return Err(rt(format!("document has no attribute `{other}`"))),
                })
            }
            other => Err(rt(format!("{} has no attribute `{name}`", other.class()))),
        }
    }

    fn call_method(
        &mut self,
        obj: &ObjRef,
        name: &str,
        args: Vec<Value>,
        kwargs: Vec<(String, Value)>,
    ) -> Result<Value, HostError> {
        if !kwargs.is_empty() && !matches!((obj, name), (ObjRef::Users, "filter") | (ObjRef::Proposal(_), _)) {
            return Err(rt(format!("`{name}` does not take keyword arguments")));
        }
        let c = &self.st.community;
        match obj {
            ObjRef::Action(id) => self.action_method(id, name, args),
            ObjRef::Data(scope) => self.data_method(scope, name, args),
            ObjRef::Proposal(id) => match name {
                "get_yes_votes" => self.votes_matching(id, &args, &kwargs, true, |v| *v == VoteValue::Boolean(true)),
                "get_no_votes" => self.votes_matching(id, &args, &kwargs, true, |v| *v == VoteValue::Boolean(false)),
                "get_choice_votes" => {
                    let option = match args.first() {
                        Some(Value::Int(n)) if *n >= 1 => *n as u32,
                        _ => return Err(rt("get_choice_votes(option, users?) with option >= 1")),
                    };
                    self.votes_matching(id, &args, &kwargs, false, |v| *v == VoteValue::Choice(option))
                }
                "voters" => self.votes_matching(id, &args, &kwargs, true, |_| true),
                "elapsed" => {
                    let a = self.find_action(id)?;
                    Ok(Value::Duration(self.now.since(a.proposal.created_at)))
                }
                "stage_elapsed" => Ok(Value::Duration(self.now.since(self.stage_started_at))),
                "vote_of" => {
                    let a = self.find_action(id)?;
                    let who = self.user_list(args.first().unwrap_or(&Value::None))?;
                    let [who] = who.as_slice() else {
                        return Err(rt("vote_of(user)"));
                    };
                    Ok(a.proposal.votes.iter().find(|v| &v.voter == who).map_or(Value::None, |v| match v.value {
                        VoteValue::Boolean(b) => Value::Bool(b),
                        VoteValue::Choice(n) => Value::Int(n as i64),
                    }))
                }
                other => Err(rt(format!("proposal has no method `{other}`"))),
            },
            ObjRef::Users => match name {
                "filter" => self.users_filter(&kwargs),
                "get" => match args.as_slice() {
                    [v @ (Value::Str(_) | Value::Object(ObjRef::User(_)))] => {
                        let id = self.user_list(v)?.remove(0);
                        Ok(if c.is_member(&id) { user_obj(&id) } else { Value::None })
                    }
                    _ => Err(rt("users.get(id)")),
                },
                "all" => Ok(Value::List(c.members.iter().map(user_obj).collect())),
                other => Err(rt(format!("users has no method `{other}`"))),
            },
            ObjRef::Roles => match (name, args.as_slice()) {
                ("get", [Value::Str(n)]) => {
                    let id = RoleId::from(n.as_str());
                    Ok(if c.roles.contains_key(&id) { Value::Object(ObjRef::Role(id)) } else { Value::None })
                }
                _ => Err(rt(format!("roles has no method `{name}` with these arguments"))),
            },
            ObjRef::Documents => match (name, args.as_slice()) {
                ("get", [Value::Str(n)]) => {
                    let id = DocumentId::from(n.as_str());
                    Ok(if c.document(&id).is_some() { Value::Object(ObjRef::Document(id)) } else { Value::None })
                }
                _ => Err(rt(format!("documents has no method `{name}` with these arguments"))),
            },
            ObjRef::Policies => match (name, args.as_slice()) {
                ("get", [Value::Str(n)]) => Ok(c
                    .policies
                    .iter()
                    .find(|p| p.name == *n || p.id.as_str() == n)
                    .map_or(Value::None, |p| Value::Object(ObjRef::Policy(p.id.clone())))),
                _ => Err(rt(format!("policies has no method `{name}` with these arguments"))),
            },
            ObjRef::Role(id) => match (name, args.as_slice()) {
                ("has_member", [u]) => {
                    let role = c.roles.get(id).ok_or_else(|| rt(format!("no role {id}")))?;
                    let who = self.user_list(u)?;
                    Ok(Value::Bool(!who.is_empty() && who.iter().all(|w| role.members.contains(w))))
                }
                _ => Err(rt(format!("role has no method `{name}` with these arguments"))),
            },
            ObjRef::User(id) => match (name, args.as_slice()) {
                ("has_role", [Value::Str(r)]) => Ok(Value::Bool(
                    c.roles.get(&RoleId::from(r.as_str())).is_some_and(|role| role.members.contains(id)),
                )),
                _ => Err(rt(format!("user has no method `{name}` with these arguments"))),
            },
            other => Err(rt(format!("{} has no method `{name}`", other.class()))),
        }
    }

    fn call_function(&mut self, name: &str, args: Vec<Value>, kwargs: Vec<(String, Value)>) -> Result<Value, HostError> {
        if !kwargs.is_empty() && name != "notify_users" {
            return Err(rt(format!("`{name}` does not take keyword arguments")));
        }
        match name {
            "days" => Self::duration(name, &args, Span::days(1)),
            "hours" => Self::duration(name, &args, Span::hours(1)),
            "minutes" => Self::duration(name, &args, Span::minutes(1)),
            "now" => {
                self.require(Capability::Clock, "now")?;
                Ok(Value::Time(self.now))
            }
            "notify_users" => self.notify_users(args, kwargs),
            "random_sample" => self.random_sample(args),
            "http_fetch" => self.http_fetch(args),
            "propose_action" => self.propose_action(args),
            "log" => {
                let text = args.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ");
                self.effects.push(Effect::Log { text });
                Ok(Value::None)
            }
            other => Err(rt(format!("unknown function `{other}`"))),
        }
    }

    fn iterate(&mut self, obj: &ObjRef) -> Result<Vec<Value>, HostError> {
        let c = &self.st.community;
        Ok(match obj {
            ObjRef::Users => c.members.iter().map(user_obj).collect(),
            ObjRef::Roles => c.roles.keys().map(|r| Value::Object(ObjRef::Role(r.clone()))).collect(),
            ObjRef::Documents => c.documents.iter().map(|d| Value::Object(ObjRef::Document(d.id.clone()))).collect(),
            ObjRef::Policies => c.policies.iter().map(|p| Value::Object(ObjRef::Policy(p.id.clone()))).collect(),
            ObjRef::Role(r) => {
                let role = c.roles.get(r).ok_or_else(|| rt(format!("no role {r}")))?;
                role.members.iter().map(user_obj).collect()
            }
            ObjRef::Action(id) => {
                let a = self.find_action(id)?;
                if a.bundle.is_none() {
                    return Err(rt("only bundles are iterable"));
                }
                self.bundle_members(a).into_iter().map(|m| Value::Object(ObjRef::Action(m))).collect()
            }
            ObjRef::Data(scope) => self.store(scope)?.0.keys().map(|k| Value::str(k.as_str())).collect(),
            other => return Err(rt(format!("cannot iterate over {}", other.class()))),
        })
    }

    fn deadline_expired(&self) -> bool {
        self.deadline()
    }
}
