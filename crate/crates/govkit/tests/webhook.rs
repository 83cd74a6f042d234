mod common;

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use common::*;
use govkit::node::Node;
use govkit::webhook::{self, sign, verify, Envelope, WebhookConfig, WebhookPlatform, SIGNATURE_HEADER};
use govkit_core::bootstrap::{bootstrap_community, seed_change};
use govkit_core::engine::{Command, EventKind};
use govkit_core::ids::{ActionId, UserId};
use govkit_core::model::{Action, DataStore, Layer, Origin, Proposal, User};
use govkit_core::platform::{Notification, Platform, VoteKind};
use govkit_core::ErrorCode;
use serde_json::{json, Value};

const SECRET: &str = "bridge-secret";

#[derive(Default)]
struct Bridge {
    /// `(path, signature verified)` per request.
    calls: Vec<(String, bool)>,
    /// Requests to answer with 500 before succeeding.
    fail_first: usize,
}

type Shared = Arc<Mutex<Bridge>>;

async fn on_action(State(b): State<Shared>, Path((name, op)): Path<(String, String)>, h: HeaderMap, body: Bytes) -> StatusCode {
    let ok = h.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()).is_some_and(|s| verify(SECRET, &body, s));
    let mut b = b.lock().unwrap();
    b.calls.push((format!("/actions/{name}/{op}"), ok));
    if b.fail_first > 0 {
        b.fail_first -= 1;
        return StatusCode::INTERNAL_SERVER_ERROR;
    }
    StatusCode::OK
}

async fn on_notify(State(b): State<Shared>, h: HeaderMap, body: Bytes) -> Json<Value> {
    let ok = h.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()).is_some_and(|s| verify(SECRET, &body, s));
    let mut b = b.lock().unwrap();
    b.calls.push(("/notify".into(), ok));
    Json(json!({"message": format!("bridge-{}", b.calls.len())}))
}

/// Runs a bridge on its own runtime thread; returns its base URL.
fn start_bridge(fail_first: usize) -> (String, Shared) {
    let shared: Shared = Arc::new(Mutex::new(Bridge { fail_first, ..Bridge::default() }));
    let app = Router::new()
        .route("/actions/{name}/{op}", post(on_action))
        .route("/notify", post(on_notify))
        .with_state(shared.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), shared)
}

fn cfg(base: &str) -> WebhookConfig {
    WebhookConfig { platform: "chatbridge".into(), secret: SECRET.into(), base_url: base.into(), attempts: 3, backoff_ms: 5 }
}

fn message_action() -> Action {
    Action {
        id: ActionId::from("a-1"),
        action_type: "post_message".into(),
        layer: Layer::Platform,
        initiator: UserId::from("u1"),
        payload: obj(json!({"channel": "general", "text": "hello"})),
        proposal: Proposal::new(T0),
        data: DataStore::default(),
        datetime_trigger: None,
        origin: Origin::PlatformEvent,
        bundle: None,
        member_of: None,
        in_effect: true,
        undo: None,
    }
}

#[test]
fn signatures_round_trip_and_reject_tampering() {
    let body = br#"{"type":"post_message"}"#;
    let sig = sign(SECRET, body);
    assert!(sig.starts_with("sha256="));
    assert!(verify(SECRET, body, &sig));
    assert!(!verify(SECRET, br#"{"type":"pin_message"}"#, &sig));
    assert!(!verify("other", body, &sig));
    assert!(!verify(SECRET, body, "sha256=zz"));
    assert!(!verify(SECRET, body, &sig.replace("sha256=", "")));
}

#[test]
fn envelopes_become_commands() {
    let ev: Envelope = serde_json::from_value(json!({
        "event_id": "e1", "type": "post_message", "actor_handle": "u1",
        "payload": {"channel": "general", "text": "hi"}
    }))
    .unwrap();
    assert!(matches!(ev.into_command().unwrap(), Command::PlatformEvent { event_id: Some(ref e), .. } if e == "e1"));
    let sig: Envelope = serde_json::from_value(json!({
        "event_id": "e2", "type": "vote_signal", "actor_handle": "u2",
        "payload": {"message": "bridge-7", "signal": "+1"}
    }))
    .unwrap();
    assert!(matches!(sig.into_command().unwrap(), Command::Signal { ref signal, .. } if signal == "+1"));
    let bad: Envelope =
        serde_json::from_value(json!({"event_id": "e3", "type": "vote_signal", "actor_handle": "u2"})).unwrap();
    assert_eq!(bad.into_command().unwrap_err().code, ErrorCode::InvalidInput);
}

#[test]
fn execute_retries_until_the_bridge_accepts() {
    let (base, bridge) = start_bridge(2);
    let mut p = WebhookPlatform::new(cfg(&base));
    p.execute(&message_action()).unwrap();
    let b = bridge.lock().unwrap();
    assert_eq!(b.calls.len(), 3);
    assert!(b.calls.iter().all(|(path, ok)| path == "/actions/post_message/execute" && *ok));
}

#[test]
fn execute_gives_up_after_the_configured_attempts() {
    let (base, bridge) = start_bridge(10);
    let mut p = WebhookPlatform::new(cfg(&base));
    let err = p.revert(&message_action()).unwrap_err();
    assert_eq!(err.code, ErrorCode::ExecutionFailed);
    assert_eq!(bridge.lock().unwrap().calls.len(), 3);
}

#[test]
fn notifications_return_the_bridge_message_id() {
    let (base, bridge) = start_bridge(0);
    let mut p = WebhookPlatform::new(cfg(&base));
    let n = Notification {
        action: ActionId::from("a-1"),
        recipients: vec![UserId::from("u1"), UserId::from("u2")],
        handles: vec!["u1".into(), "u2".into()],
        text: "vote please".into(),
        vote_kind: VoteKind::Boolean,
        options: Vec::new(),
    };
    let id = p.deliver(&n).unwrap();
    assert_eq!(id.as_str(), "bridge-1");
    assert_eq!(bridge.lock().unwrap().calls, vec![("/notify".to_string(), true)]);
}

const REJECT_ALL: &str = r#"
def filter(action, policy) {
    return action.action_type == "post_message"
}
def initialize(action, policy) {}
def check(action, policy) {
    return FAILED
}
def notify(action, policy) {}
def pass(action, policy) {}
def fail(action, policy) {
    action.revert()
    notify_users([action.initiator], "removed")
}
"#;

#[test]
fn governed_events_call_back_and_replay_without_the_bridge() {
    let (base, bridge) = start_bridge(0);
    let c = cfg(&base);
    let members = ["u1", "u2"]
        .iter()
        .map(|id| {
            let mut u = User::new(*id);
            u.platform_handle = id.to_string();
            u
        })
        .collect();
    let mut community = bootstrap_community("Bridged", members, 1, &webhook::descriptor(&c), T0).unwrap();
    seed_change(&mut community, "PolicyAdd", "reject", json!({"name": "reject", "layer": "PLATFORM", "source": REJECT_ALL}), T0)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut node = Node::create(dir.path(), community, Box::new(WebhookPlatform::new(c.clone())), T0).unwrap();
    node.log_mut().set_sync(false);
    let env: Envelope = serde_json::from_value(json!({
        "event_id": "evt-1", "type": "post_message", "actor_handle": "u1",
        "payload": {"channel": "general", "text": "spam"}
    }))
    .unwrap();
    node.apply(T0, env.clone().into_command().unwrap()).unwrap();
    let paths: Vec<String> = bridge.lock().unwrap().calls.iter().map(|(p, _)| p.clone()).collect();
    assert_eq!(paths, vec!["/actions/post_message/revert".to_string(), "/notify".to_string()]);

    // Redelivery of the same event id is ignored.
    let again = node.apply(T0, env.into_command().unwrap()).unwrap();
    assert!(matches!(again, govkit_core::engine::Reply::Ignored { .. }));
    assert_eq!(bridge.lock().unwrap().calls.len(), 2);

    let before = state_bytes(&node);
    drop(node);
    let dead = WebhookConfig { base_url: "http://127.0.0.1:9".into(), ..c };
    let (reopened, _) = Node::open(dir.path(), |_| Ok(Box::new(WebhookPlatform::new(dead.clone())))).unwrap();
    assert_eq!(state_bytes(&reopened), before);
    assert!(reopened.events().iter().any(|e| e.kind == EventKind::ExternalResponse));
}
