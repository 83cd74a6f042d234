#![allow(dead_code)]

use std::collections::VecDeque;

use govkit_core::bootstrap::{bootstrap_community, seed_change};
use govkit_core::engine::{Command, Engine, EngineEvent, EventKind, SubmitRequest};
use govkit_core::ids::UserId;
use govkit_core::model::{Community, User};
use govkit_core::platform::{sandbox_descriptor, Channel, SandboxPlatform, SandboxState};
use govkit_core::time::{Span, Timestamp};
use serde_json::{json, Map, Value as Json};

pub const T0: Timestamp = Timestamp::from_millis(1_700_000_000_000);

pub fn at(offset: Span) -> Timestamp {
    T0 + offset
}

pub fn uid(s: &str) -> UserId {
    UserId::from(s)
}

/// `n` members `u1..un` with handles `@u1..`.
pub fn community(n: usize) -> Community {
    let members = (1..=n)
        .map(|i| {
            let mut u = User::new(format!("u{i}"));
            u.platform_handle = format!("@u{i}");
            u
        })
        .collect();
    bootstrap_community("Test Commons", members, 7, &sandbox_descriptor(), T0).unwrap()
}

pub fn sandbox(c: &Community) -> SandboxPlatform {
    let mut st = SandboxState::default();
    let handles: Vec<String> = c.users.values().map(|u| u.platform_handle.clone()).collect();
    st.channels.insert("general".into(), Channel { members: handles, ..Channel::default() });
    st.handles = c.users.iter().map(|(k, u)| (k.clone(), u.platform_handle.clone())).collect();
    SandboxPlatform::new(st)
}

pub fn engine(c: Community) -> Engine {
    let p = sandbox(&c);
    Engine::genesis(c, Box::new(p), T0).unwrap()
}

pub fn add_policy(c: &mut Community, name: &str, layer: &str, source: &str) {
    seed_change(c, "PolicyAdd", name, json!({"name": name, "layer": layer, "source": source}), T0).unwrap();
}

pub fn obj(v: Json) -> Map<String, Json> {
    match v {
        Json::Object(m) => m,
        _ => panic!("not an object"),
    }
}

pub fn submit(user: &str, action_type: &str, payload: Json) -> Command {
    Command::Submit(SubmitRequest {
        initiator: uid(user),
        action_type: action_type.into(),
        payload: obj(payload),
        datetime_trigger: None,
        bundle: None,
    })
}

pub fn post(user: &str, text: &str) -> Command {
    Command::PlatformEvent {
        event_id: None,
        actor_handle: format!("@{user}"),
        action_type: "post_message".into(),
        payload: obj(json!({"channel": "general", "text": text})),
    }
}

pub fn yes(user: &str, action: &str) -> Command {
    Command::Vote {
        voter: uid(user),
        action: action.into(),
        value: govkit_core::model::VoteValue::Boolean(true),
    }
}

pub fn no(user: &str, action: &str) -> Command {
    Command::Vote {
        voter: uid(user),
        action: action.into(),
        value: govkit_core::model::VoteValue::Boolean(false),
    }
}

pub fn visible_texts(e: &Engine) -> Vec<String> {
    let st = e.platform().state();
    st["channels"]["general"]["messages"]
        .as_array()
        .map(|ms| ms.iter().map(|m| m["text"].as_str().unwrap_or_default().to_string()).collect())
        .unwrap_or_default()
}

pub fn kinds(events: &[EngineEvent]) -> Vec<EventKind> {
    events.iter().map(|e| e.kind).collect()
}

/// Rebuilds an engine from a log by re-running each command group over the
/// genesis record with its recorded external answers.
pub fn replay(log: &[EngineEvent], platform: SandboxPlatform) -> (Engine, Vec<EngineEvent>) {
    let mut e = Engine::from_genesis(&log[0], Box::new(platform)).unwrap();
    let mut out = vec![log[0].clone()];
    let mut i = 1;
    while i < log.len() {
        let head = &log[i];
        assert_eq!(head.kind, EventKind::CommandAccepted);
        let mut j = i + 1;
        while j < log.len() && log[j].kind != EventKind::CommandAccepted {
            j += 1;
        }
        let tape: VecDeque<Json> = log[i..j]
            .iter()
            .filter(|x| x.kind == EventKind::ExternalResponse)
            .map(|x| x.payload.clone())
            .collect();
        let cmd: Command = serde_json::from_value(head.payload["command"].clone()).unwrap();
        let _ = e.replay_command(head.ts, cmd, tape);
        out.extend(e.take_events());
        i = j;
    }
    (e, out)
}
