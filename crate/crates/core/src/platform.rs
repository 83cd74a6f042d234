//! The contract between the engine and a community platform, and the
//! deterministic in-memory sandbox platform used for scenarios and tests.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::error::{ErrorCode, FieldError, GovError, Result};
use crate::ids::{ActionId, MessageRef, UserId};
use crate::model::{Action, ActionTypeInfo, Layer, VoteValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VoteKind {
    None,
    Boolean,
    Choice,
}

/// A governance message to deliver on the platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub action: ActionId,
    pub recipients: Vec<UserId>,
    /// Platform handles of `recipients`, same order.
    pub handles: Vec<String>,
    pub text: String,
    pub vote_kind: VoteKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformActionType {
    pub name: String,
    pub schema: Json,
    /// How the adapter carries out the action (a sandbox operation or a URL template).
    pub execute: String,
    pub revert: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationTemplates {
    pub boolean: String,
    pub choice: String,
}

/// Which reaction or reply strings count as which vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalMapping {
    pub yes: Vec<String>,
    pub no: Vec<String>,
}

impl Default for SignalMapping {
    fn default() -> Self {
        SignalMapping {
            yes: ["yes", "y", "+1", "👍", ":+1:", ":thumbsup:"].iter().map(|s| s.to_string()).collect(),
            no: ["no", "n", "-1", "👎", ":-1:", ":thumbsdown:"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDescriptor {
    pub platform: String,
    pub action_types: Vec<PlatformActionType>,
    pub templates: NotificationTemplates,
    pub signals: SignalMapping,
}

impl AdapterDescriptor {
    pub fn action_type(&self, name: &str) -> Option<&PlatformActionType> {
        self.action_types.iter().find(|t| t.name == name)
    }

    pub fn registry_entries(&self) -> Vec<ActionTypeInfo> {
        self.action_types
            .iter()
            .map(|t| ActionTypeInfo { name: t.name.clone(), layer: Layer::Platform })
            .collect()
    }

    /// Checks `payload` against the declared schema: required string fields,
    /// typed optional fields and no unknown fields.
    pub fn validate_payload(&self, action_type: &str, payload: &Map<String, Json>) -> Vec<FieldError> {
        let Some(t) = self.action_type(action_type) else {
            return alloc::vec![FieldError::new("action_type", format!("unknown platform action `{action_type}`"))];
        };
        validate_against(&t.schema, payload)
    }

    /// Decodes a reaction/reply on a governance message into a vote.
    /// `Ok(None)` means the signal is not a vote at all.
    pub fn decode_signal(&self, kind: VoteKind, options: usize, signal: &str) -> Result<Option<VoteValue>> {
        let s = signal.trim();
        match kind {
            VoteKind::None => Ok(None),
            VoteKind::Boolean => {
                let lower = s.to_lowercase();
                if self.signals.yes.contains(&lower) {
                    Ok(Some(VoteValue::Boolean(true)))
                } else if self.signals.no.contains(&lower) {
                    Ok(Some(VoteValue::Boolean(false)))
                } else {
                    Ok(None)
                }
            }
            VoteKind::Choice => {
                let digits = s.trim_end_matches(['\u{fe0f}', '\u{20e3}']);
                let Ok(n) = digits.parse::<u32>() else {
                    return Ok(None);
                };
                if n == 0 || n as usize > options {
                    return Err(GovError::new(
                        ErrorCode::InvalidInput,
                        format!("choice {n} is out of range 1..={options}"),
                    ));
                }
                Ok(Some(VoteValue::Choice(n)))
            }
        }
    }
}

fn validate_against(schema: &Json, payload: &Map<String, Json>) -> Vec<FieldError> {
    let mut errors = Vec::new();
    let props = schema.get("properties").and_then(Json::as_object);
    let required: Vec<&str> = schema
        .get("required")
        .and_then(Json::as_array)
        .map(|r| r.iter().filter_map(Json::as_str).collect())
        .unwrap_or_default();
    for r in &required {
        if !payload.contains_key(*r) {
            errors.push(FieldError::new(*r, "is required"));
        }
    }
    for (k, v) in payload {
        let Some(prop) = props.and_then(|p| p.get(k)) else {
            errors.push(FieldError::new(k.as_str(), "unknown field"));
            continue;
        };
        let ok = match prop.get("type").and_then(Json::as_str) {
            Some("string") => v.as_str().is_some_and(|s| !s.is_empty() || prop.get("minLength").is_none()),
            Some("boolean") => v.is_boolean(),
            Some("integer") => v.is_i64(),
            _ => true,
        };
        if !ok {
            errors.push(FieldError::new(k.as_str(), format!("must be a {}", prop["type"].as_str().unwrap_or("value"))));
        }
    }
    errors
}

/// What the engine needs from a platform. Implementations for real
/// platforms talk to the network and are therefore not deterministic; the
/// engine records their answers so that replay never calls out.
pub trait Platform: Send {
    fn descriptor(&self) -> &AdapterDescriptor;

    /// Mirrors a member's own attempt, which already took effect on the platform.
    fn user_event(&mut self, action: &Action) -> Result<()>;

    fn execute(&mut self, action: &Action) -> Result<()>;

    fn revert(&mut self, action: &Action) -> Result<()>;

    fn deliver(&mut self, n: &Notification) -> Result<MessageRef>;

    /// Serializable platform-side state, for snapshots and replay checks.
    fn state(&self) -> Json;

    fn restore(&mut self, state: &Json) -> Result<()>;

    fn deterministic(&self) -> bool {
        true
    }
}

pub const POST_MESSAGE: &str = "post_message";
pub const DELETE_MESSAGE: &str = "delete_message";
pub const RENAME_CHANNEL: &str = "rename_channel";
pub const SET_TOPIC: &str = "set_topic";
pub const CREATE_CHANNEL: &str = "create_channel";
pub const JOIN_CHANNEL: &str = "join_channel";
pub const LEAVE_CHANNEL: &str = "leave_channel";
pub const PIN_MESSAGE: &str = "pin_message";
pub const SET_ROLE_FLAG: &str = "set_role_flag";

pub const SANDBOX_TYPES: [&str; 9] = [
    POST_MESSAGE,
    DELETE_MESSAGE,
    RENAME_CHANNEL,
    SET_TOPIC,
    CREATE_CHANNEL,
    JOIN_CHANNEL,
    LEAVE_CHANNEL,
    PIN_MESSAGE,
    SET_ROLE_FLAG,
];

fn platform_schema(name: &str, props: Json, required: &[&str]) -> Json {
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": name,
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": false,
    })
}

/// The action types every chat-like adapter exposes.
pub fn chat_action_types(binding: impl Fn(&str, &str) -> String) -> Vec<PlatformActionType> {
    let s = json!({"type": "string", "minLength": 1});
    let text = json!({"type": "string"});
    let defs: [(&str, Json, &[&str]); 9] = [
        (POST_MESSAGE, json!({"channel": s, "text": text}), &["channel", "text"]),
        (DELETE_MESSAGE, json!({"channel": s, "message": s}), &["channel", "message"]),
        (RENAME_CHANNEL, json!({"old": s, "new": s}), &["old", "new"]),
        (SET_TOPIC, json!({"channel": s, "topic": text}), &["channel", "topic"]),
        (CREATE_CHANNEL, json!({"name": s, "topic": text}), &["name"]),
        (JOIN_CHANNEL, json!({"channel": s}), &["channel"]),
        (LEAVE_CHANNEL, json!({"channel": s}), &["channel"]),
        (PIN_MESSAGE, json!({"channel": s, "message": s}), &["channel", "message"]),
        (SET_ROLE_FLAG, json!({"user": s, "flag": s, "value": {"type": "boolean"}}), &["user", "flag", "value"]),
    ];
    defs.into_iter()
        .map(|(name, props, req)| PlatformActionType {
            name: name.to_string(),
            schema: platform_schema(name, props, req),
            execute: binding(name, "execute"),
            revert: binding(name, "revert"),
        })
        .collect()
}

pub fn default_templates() -> NotificationTemplates {
    NotificationTemplates {
        boolean: "{text}\nReact with 👍 (yes) or 👎 (no), or reply +1 / -1.".to_string(),
        choice: "{text}\n{options}\nReact with the number of your choice.".to_string(),
    }
}

pub fn sandbox_descriptor() -> AdapterDescriptor {
    AdapterDescriptor {
        platform: "sandbox".to_string(),
        action_types: chat_action_types(|name, op| format!("sandbox:{op}:{name}")),
        templates: default_templates(),
        signals: SignalMapping::default(),
    }
}

/// Renders a notification body through the adapter's template.
pub fn render_notification(t: &NotificationTemplates, n: &Notification) -> String {
    let mentions = n.handles.iter().map(|h| format!("@{h}")).collect::<Vec<_>>().join(" ");
    let text = if mentions.is_empty() { n.text.clone() } else { format!("{mentions} {}", n.text) };
    match n.vote_kind {
        VoteKind::None => text,
        VoteKind::Boolean => t.boolean.replace("{text}", &text),
        VoteKind::Choice => {
            let opts = n
                .options
                .iter()
                .enumerate()
                .map(|(i, o)| format!("{}. {o}", i + 1))
                .collect::<Vec<_>>()
                .join("\n");
            t.choice.replace("{text}", &text).replace("{options}", &opts)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub author: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Channel {
    pub topic: String,
    pub members: Vec<String>,
    pub messages: Vec<Message>,
    pub pinned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovernanceMessage {
    pub id: MessageRef,
    pub action: ActionId,
    pub recipients: Vec<String>,
    pub text: String,
    pub vote_kind: VoteKind,
}

/// Inverse of one sandbox mutation, keyed by the action that made it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SandboxUndo {
    Posted { channel: String, message: String },
    Deleted { channel: String, index: usize, message: Message, pinned_at: Option<usize> },
    Renamed { old: String, new: String },
    TopicSet { channel: String, prior: String },
    Created { name: String },
    Joined { channel: String, user: String },
    Left { channel: String, index: usize, user: String },
    Pinned { channel: String, message: String },
    FlagSet { user: String, flag: String, prior: bool },
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SandboxState {
    pub channels: BTreeMap<String, Channel>,
    /// User id to platform handle.
    pub handles: BTreeMap<UserId, String>,
    pub role_flags: BTreeMap<String, BTreeSet<String>>,
    pub governance_messages: Vec<GovernanceMessage>,
    pub next_notice: u64,
    pub undo: BTreeMap<ActionId, SandboxUndo>,
}

impl SandboxState {
    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.get(name)
    }

    /// The platform-visible part of the state: everything except the
    /// governance message feed and bookkeeping.
    pub fn visible(&self) -> Json {
        json!({"channels": self.channels, "role_flags": self.role_flags})
    }
}

/// Deterministic in-memory chat platform.
#[derive(Debug, Clone)]
pub struct SandboxPlatform {
    descriptor: AdapterDescriptor,
    pub state: SandboxState,
}

impl Default for SandboxPlatform {
    fn default() -> Self {
        SandboxPlatform::new(SandboxState::default())
    }
}

fn fail(msg: impl Into<String>) -> GovError {
    GovError::new(ErrorCode::ExecutionFailed, msg)
}

impl SandboxPlatform {
    pub fn new(state: SandboxState) -> Self {
        SandboxPlatform { descriptor: sandbox_descriptor(), state }
    }

    fn handle_of(&self, user: &UserId) -> String {
        self.state.handles.get(user).cloned().unwrap_or_else(|| user.to_string())
    }

    fn chan_mut(&mut self, name: &str) -> Result<&mut Channel> {
        self.state.channels.get_mut(name).ok_or_else(|| fail(format!("no channel #{name}")))
    }

    /// Applies `action` and returns its inverse. Preconditions are checked
    /// before anything changes, so a failed apply leaves the state untouched.
    pub fn apply(&mut self, action: &Action) -> Result<SandboxUndo> {
        let p = &action.payload;
        let s = |k: &str| p.get(k).and_then(Json::as_str).unwrap_or_default().to_string();
        let actor = self.handle_of(&action.initiator);
        Ok(match action.action_type.as_str() {
            POST_MESSAGE => {
                let id = format!("m-{}", action.id);
                let ch = self.chan_mut(&s("channel"))?;
                if ch.messages.iter().any(|m| m.id == id) {
                    return Err(fail(format!("message {id} already posted")));
                }
                ch.messages.push(Message { id: id.clone(), author: actor, text: s("text") });
                SandboxUndo::Posted { channel: s("channel"), message: id }
            }
            DELETE_MESSAGE => {
                let msg = s("message");
                let ch = self.chan_mut(&s("channel"))?;
                let index = ch
                    .messages
                    .iter()
                    .position(|m| m.id == msg)
                    .ok_or_else(|| fail(format!("no message {msg}")))?;
                let message = ch.messages.remove(index);
                let pinned_at = ch.pinned.iter().position(|m| *m == msg);
                if let Some(i) = pinned_at {
                    ch.pinned.remove(i);
                }
                SandboxUndo::Deleted { channel: s("channel"), index, message, pinned_at }
            }
            RENAME_CHANNEL => {
                let (old, new) = (s("old"), s("new"));
                if self.state.channels.contains_key(&new) {
                    return Err(fail(format!("#{new} already exists")));
                }
                let ch = self.state.channels.remove(&old).ok_or_else(|| fail(format!("no channel #{old}")))?;
                self.state.channels.insert(new.clone(), ch);
                SandboxUndo::Renamed { old, new }
            }
            SET_TOPIC => {
                let topic = s("topic");
                let ch = self.chan_mut(&s("channel"))?;
                let prior = core::mem::replace(&mut ch.topic, topic);
                SandboxUndo::TopicSet { channel: s("channel"), prior }
            }
            CREATE_CHANNEL => {
                let name = s("name");
                if self.state.channels.contains_key(&name) {
                    return Err(fail(format!("#{name} already exists")));
                }
                self.state
                    .channels
                    .insert(name.clone(), Channel { topic: s("topic"), members: alloc::vec![actor], ..Channel::default() });
                SandboxUndo::Created { name }
            }
            JOIN_CHANNEL => {
                let ch = self.chan_mut(&s("channel"))?;
                if ch.members.contains(&actor) {
                    SandboxUndo::Nothing
                } else {
                    ch.members.push(actor.clone());
                    SandboxUndo::Joined { channel: s("channel"), user: actor }
                }
            }
            LEAVE_CHANNEL => {
                let ch = self.chan_mut(&s("channel"))?;
                match ch.members.iter().position(|m| *m == actor) {
                    Some(index) => {
                        ch.members.remove(index);
                        SandboxUndo::Left { channel: s("channel"), index, user: actor }
                    }
                    None => SandboxUndo::Nothing,
                }
            }
            PIN_MESSAGE => {
                let msg = s("message");
                let ch = self.chan_mut(&s("channel"))?;
                if !ch.messages.iter().any(|m| m.id == msg) {
                    return Err(fail(format!("no message {msg}")));
                }
                if ch.pinned.contains(&msg) {
                    SandboxUndo::Nothing
                } else {
                    ch.pinned.push(msg.clone());
                    SandboxUndo::Pinned { channel: s("channel"), message: msg }
                }
            }
            SET_ROLE_FLAG => {
                let (user, flag) = (s("user"), s("flag"));
                let value = p.get("value").and_then(Json::as_bool).unwrap_or(false);
                let flags = self.state.role_flags.entry(user.clone()).or_default();
                let prior = flags.contains(&flag);
                if value {
                    flags.insert(flag.clone());
                } else {
                    flags.remove(&flag);
                }
                if flags.is_empty() {
                    self.state.role_flags.remove(&user);
                }
                SandboxUndo::FlagSet { user, flag, prior }
            }
            other => return Err(GovError::new(ErrorCode::UnknownActionType, format!("sandbox has no `{other}`"))),
        })
    }

    /// Applies the inverse of an earlier [`apply`](Self::apply).
    pub fn unapply(&mut self, undo: &SandboxUndo) -> Result<()> {
        match undo {
            SandboxUndo::Posted { channel, message } => {
                let ch = self.chan_mut(channel)?;
                ch.messages.retain(|m| m.id != *message);
                ch.pinned.retain(|m| m != message);
            }
            SandboxUndo::Deleted { channel, index, message, pinned_at } => {
                let ch = self.chan_mut(channel)?;
                let at = (*index).min(ch.messages.len());
                ch.messages.insert(at, message.clone());
                if let Some(p) = pinned_at {
                    let at = (*p).min(ch.pinned.len());
                    ch.pinned.insert(at, message.id.clone());
                }
            }
            SandboxUndo::Renamed { old, new } => {
                if self.state.channels.contains_key(old) {
                    return Err(fail(format!("#{old} exists again")));
                }
                let ch = self.state.channels.remove(new).ok_or_else(|| fail(format!("no channel #{new}")))?;
                self.state.channels.insert(old.clone(), ch);
            }
            SandboxUndo::TopicSet { channel, prior } => {
                self.chan_mut(channel)?.topic = prior.clone();
            }
            SandboxUndo::Created { name } => {
                self.state.channels.remove(name);
            }
            SandboxUndo::Joined { channel, user } => {
                self.chan_mut(channel)?.members.retain(|m| m != user);
            }
            SandboxUndo::Left { channel, index, user } => {
                let ch = self.chan_mut(channel)?;
                let at = (*index).min(ch.members.len());
                ch.members.insert(at, user.clone());
            }
            SandboxUndo::Pinned { channel, message } => {
                self.chan_mut(channel)?.pinned.retain(|m| m != message);
            }
            SandboxUndo::FlagSet { user, flag, prior } => {
                let flags = self.state.role_flags.entry(user.clone()).or_default();
                if *prior {
                    flags.insert(flag.clone());
                } else {
                    flags.remove(flag);
                }
                if flags.is_empty() {
                    self.state.role_flags.remove(user);
                }
            }
            SandboxUndo::Nothing => {}
        }
        Ok(())
    }

    /// Live vote-listener lookup: which action a governance message belongs to.
    pub fn message(&self, id: &MessageRef) -> Option<&GovernanceMessage> {
        self.state.governance_messages.iter().find(|m| &m.id == id)
    }
}

impl Platform for SandboxPlatform {
    fn descriptor(&self) -> &AdapterDescriptor {
        &self.descriptor
    }

    fn user_event(&mut self, action: &Action) -> Result<()> {
        self.execute(action)
    }

    fn execute(&mut self, action: &Action) -> Result<()> {
        if self.state.undo.contains_key(&action.id) {
            return Ok(());
        }
        let undo = self.apply(action)?;
        self.state.undo.insert(action.id.clone(), undo);
        Ok(())
    }

    fn revert(&mut self, action: &Action) -> Result<()> {
        let Some(undo) = self.state.undo.get(&action.id).cloned() else {
            return Err(GovError::new(ErrorCode::NoUndoRecord, format!("{} never took effect", action.id)));
        };
        self.unapply(&undo)?;
        self.state.undo.remove(&action.id);
        Ok(())
    }

    fn deliver(&mut self, n: &Notification) -> Result<MessageRef> {
        self.state.next_notice += 1;
        let id = MessageRef(format!("n-{}", self.state.next_notice));
        let text = render_notification(&self.descriptor.templates, n);
        self.state.governance_messages.push(GovernanceMessage {
            id: id.clone(),
            action: n.action.clone(),
            recipients: n.handles.clone(),
            text,
            vote_kind: n.vote_kind,
        });
        Ok(id)
    }

    fn state(&self) -> Json {
        serde_json::to_value(&self.state).unwrap_or(Json::Null)
    }

    fn restore(&mut self, state: &Json) -> Result<()> {
        self.state = serde_json::from_value(state.clone())
            .map_err(|e| GovError::new(ErrorCode::InvalidInput, format!("bad sandbox state: {e}")))?;
        Ok(())
    }
}
