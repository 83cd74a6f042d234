mod common;

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::T0;
use govkit::api::{router, status_for, AppState};
use govkit::datadir::{CommunitySpec, DataDir, IssuedTokens, MemberEntry};
use govkit::store::{read_log, LOG_FILE};
use govkit_core::engine::EventKind;
use govkit_core::time::Timestamp;
use govkit_core::ErrorCode;
use http_body_util::BodyExt;
use serde_json::{json, Map, Value as Json};
use tower::ServiceExt;

struct Harness {
    app: Router,
    tokens: IssuedTokens,
    data: DataDir,
    _dir: tempfile::TempDir,
    clock: Arc<AtomicI64>,
}

fn member(id: &str) -> MemberEntry {
    MemberEntry { id: id.into(), display_name: None, handle: Some(id.into()), attributes: Map::new() }
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path().join("data"));
    let spec = CommunitySpec {
        name: "Api Commons".into(),
        members: vec![member("u1"), member("u2"), member("u3")],
        seed: 1,
        adapter: None,
        channels: Vec::new(),
    };
    let (node, tokens) = data.init(&spec, T0).unwrap();
    drop(node);
    let clock = Arc::new(AtomicI64::new(T0.as_millis()));
    let c = clock.clone();
    let state = AppState::open(data.clone(), Box::new(move || Timestamp::from_millis(c.load(Ordering::SeqCst)))).unwrap();
    Harness { app: router(state), tokens, data, _dir: dir, clock }
}

impl Harness {
    fn token(&self, user: &str) -> String {
        self.tokens.members.iter().find(|(u, _)| u.as_str() == user).unwrap().1.clone()
    }

    async fn call(&self, method: &str, uri: &str, token: Option<&str>, body: Option<Json>) -> (StatusCode, Json) {
        self.call_with(method, uri, token, body, &[]).await
    }

    async fn call_with(
        &self,
        method: &str,
        uri: &str,
        token: Option<&str>,
        body: Option<Json>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, Json) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = match body {
            Some(b) => Body::from(serde_json::to_vec(&b).unwrap()),
            None => Body::empty(),
        };
        let res = self.app.clone().oneshot(req.header("content-type", "application/json").body(body).unwrap()).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        let json = if bytes.is_empty() { Json::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, json)
    }

    async fn propose_role(&self, user: &str, name: &str) -> String {
        let (s, b) = self
            .call("POST", "/api/v1/actions", Some(&self.token(user)), Some(json!({"action_type": "RoleAdd", "payload": {"name": name}})))
            .await;
        assert_eq!(s, StatusCode::ACCEPTED, "{b}");
        b["action"].as_str().unwrap().to_string()
    }

    async fn vote(&self, user: &str, action: &str, value: bool) -> (StatusCode, Json) {
        self.call("POST", &format!("/api/v1/actions/{action}/votes"), Some(&self.token(user)), Some(json!({"value": value})))
            .await
    }
}

#[test]
fn error_codes_map_to_http_statuses() {
    assert_eq!(status_for(ErrorCode::InvalidInput), StatusCode::BAD_REQUEST);
    assert_eq!(status_for(ErrorCode::NotFound), StatusCode::NOT_FOUND);
    assert_eq!(status_for(ErrorCode::Forbidden), StatusCode::FORBIDDEN);
    assert_eq!(status_for(ErrorCode::StaleVote), StatusCode::CONFLICT);
    assert_eq!(status_for(ErrorCode::SchemaViolation), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status_for(ErrorCode::UnknownActionType), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status_for(ErrorCode::Halted), StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn requests_need_a_known_bearer_token() {
    let h = harness();
    assert_eq!(h.call("GET", "/api/v1/actions", None, None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(h.call("GET", "/api/v1/actions", Some("gk_nope"), None).await.0, StatusCode::UNAUTHORIZED);
    let admin = h.tokens.admin.clone().unwrap();
    let (s, b) = h.call("GET", "/api/v1/actions", Some(&admin), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(b["code"], "FORBIDDEN");
}

#[tokio::test]
async fn proposal_vote_and_decision() {
    let h = harness();
    let id = h.propose_role("u1", "Gardener").await;
    let (s, a) = h.call("GET", &format!("/api/v1/actions/{id}"), Some(&h.token("u2")), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["status"], "PROPOSED");
    assert_eq!(a["governing_policy"], "p-starter");
    h.vote("u1", &id, true).await;
    let (s, v) = h.vote("u2", &id, true).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "PASSED");
    let (s, e) = h.vote("u3", &id, false).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "STALE_VOTE");
    let (_, a) = h.call("GET", &format!("/api/v1/actions/{id}"), Some(&h.token("u3")), None).await;
    assert_eq!(a["decision"]["basis"], "policy");
    assert_eq!(a["decision"]["policy"], "p-starter");
}

#[tokio::test]
async fn invalid_requests_are_rejected_with_structured_errors() {
    let h = harness();
    let t = h.token("u1");
    let (s, e) = h.call("POST", "/api/v1/actions", Some(&t), Some(json!({"action_type": "Nope"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{e}");
    assert_eq!(e["code"], "UNKNOWN_ACTION_TYPE");
    let (s, e) = h.call("POST", "/api/v1/actions", Some(&t), Some(json!({"action_type": "RoleAdd", "payload": {}}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!e["field_errors"].as_array().unwrap().is_empty(), "{e}");
    let (s, _) = h.call("POST", "/api/v1/actions", Some(&t), Some(json!({"bogus": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = h.call("GET", "/api/v1/actions/a-999", Some(&t), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = h.call("POST", "/api/v1/actions/a-999/votes", Some(&t), Some(json!({"value": true, "choice": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idempotency_key_replays_the_first_answer() {
    let h = harness();
    let t = h.token("u1");
    let body = json!({"action_type": "RoleAdd", "payload": {"name": "Scribe"}});
    let key = [("idempotency-key", "k-1")];
    let (s1, b1) = h.call_with("POST", "/api/v1/actions", Some(&t), Some(body.clone()), &key).await;
    let (s2, b2) = h.call_with("POST", "/api/v1/actions", Some(&t), Some(body), &key).await;
    assert_eq!((s1, &b1), (s2, &b2));
    let (_, list) = h.call("GET", "/api/v1/actions", Some(&t), None).await;
    assert_eq!(list["actions"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn policies_and_action_types_are_listed() {
    let h = harness();
    let t = h.token("u2");
    let (s, p) = h.call("GET", "/api/v1/policies", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    let starter = &p["policies"][0];
    assert_eq!(starter["id"], "p-starter");
    assert_eq!(starter["layer"], "CONSTITUTION");
    assert_eq!(starter["trial_mode"], false);
    assert!(starter["source"].as_str().unwrap().contains("def check"));
    let (s, _) = h.call("GET", "/api/v1/policies/p-starter", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = h.call("GET", "/api/v1/policies/p-missing", Some(&t), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, types) = h.call("GET", "/api/v1/action-types", Some(&t), None).await;
    let names: Vec<&str> = types["action_types"].as_array().unwrap().iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"PolicyAdd") && names.contains(&"post_message"));
    assert!(types["action_types"][0]["schema"].is_object());
}

#[tokio::test]
async fn document_edits_go_through_governance() {
    let h = harness();
    let t = h.token("u1");
    let (s, b) = h.call("PUT", "/api/v1/documents/d-charter", Some(&t), Some(json!({"body": "Be kind."}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{b}");
    let id = b["action"].as_str().unwrap().to_string();
    let (_, d) = h.call("GET", "/api/v1/documents/d-charter", Some(&t), None).await;
    assert_ne!(d["document"]["body"], "Be kind.");
    h.vote("u1", &id, true).await;
    h.vote("u2", &id, true).await;
    let (_, d) = h.call("GET", "/api/v1/documents/d-charter", Some(&t), None).await;
    assert_eq!(d["document"]["body"], "Be kind.", "{d}");
    assert!(!d["history"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn audit_is_filtered_and_paged() {
    let h = harness();
    let t = h.token("u1");
    for i in 0..5 {
        h.propose_role("u1", &format!("Role{i}")).await;
    }
    let (_, page) = h.call("GET", "/api/v1/audit?kind=ActionProposed&limit=2", Some(&t), None).await;
    assert_eq!(page["events"].as_array().unwrap().len(), 2);
    let cursor = page["next_cursor"].as_str().unwrap().to_string();
    let (_, next) = h.call("GET", &format!("/api/v1/audit?kind=ActionProposed&limit=10&cursor={cursor}"), Some(&t), None).await;
    assert_eq!(next["events"].as_array().unwrap().len(), 3);
    assert!(next["next_cursor"].is_null());
    let (s, _) = h.call("GET", "/api/v1/audit?kind=NoSuchKind", Some(&t), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn adapter_ingress_accepts_adapter_tokens_only() {
    let h = harness();
    let env = json!({"event_id": "e-1", "type": "post_message", "actor_handle": "u2", "payload": {"channel": "general", "text": "hi"}});
    let (s, _) = h.call("POST", "/api/v1/adapters/sandbox/events", Some(&h.token("u1")), Some(env.clone())).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let adapter = h.tokens.adapter.clone().unwrap();
    let (s, b) = h.call("POST", "/api/v1/adapters/sandbox/events", Some(&adapter), Some(env.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{b}");
    assert_eq!(b["status"], "PASSED");
    let (s, b) = h.call("POST", "/api/v1/adapters/sandbox/events", Some(&adapter), Some(env.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert!(b["ignored"].is_string());
    let (s, _) = h.call("POST", "/api/v1/adapters/elsewhere/events", Some(&adapter), Some(env)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn wait_returns_when_the_status_changes() {
    let h = Arc::new(harness());
    let id = h.propose_role("u1", "Gardener").await;
    let h2 = h.clone();
    let id2 = id.clone();
    let waiter = tokio::spawn(async move {
        h2.call("GET", &format!("/api/v1/actions/{id2}/wait?timeout_ms=5000"), Some(&h2.token("u3")), None).await
    });
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    h.vote("u1", &id, true).await;
    h.vote("u2", &id, true).await;
    let (s, a) = waiter.await.unwrap();
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["status"], "PASSED");
    let (_, a) = h.call("GET", &format!("/api/v1/actions/{id}/wait?timeout_ms=10"), Some(&h.token("u3")), None).await;
    assert_eq!(a["status"], "PASSED");
}

#[tokio::test]
async fn admin_creates_communities_once() {
    let h = harness();
    let admin = h.tokens.admin.clone().unwrap();
    let spec = json!({"name": "Second Garden", "members": [{"id": "w1"}, {"id": "w2"}]});
    let (s, b) = h.call("POST", "/api/v1/communities", Some(&admin), Some(spec.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{b}");
    assert_eq!(b["community"], "second-garden");
    let w1 = b["member_tokens"]["w1"].as_str().unwrap().to_string();
    let (s, list) = h.call("GET", "/api/v1/actions", Some(&w1), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(list["actions"].as_array().unwrap().is_empty());
    let (s, e) = h.call("POST", "/api/v1/communities", Some(&admin), Some(spec)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{e}");
    let (s, _) = h.call("POST", "/api/v1/communities", Some(&h.token("u1")), Some(json!({"name": "x", "members": []}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
}

/// Every state change the API makes is a logged command.
#[tokio::test]
async fn every_write_is_a_logged_command() {
    let h = harness();
    let id = h.propose_role("u1", "Gardener").await;
    h.vote("u1", &id, true).await;
    h.call("PUT", "/api/v1/documents/d-charter", Some(&h.token("u2")), Some(json!({"body": "x"}))).await;
    h.clock.fetch_add(60_000, Ordering::SeqCst);
    let adapter = h.tokens.adapter.clone().unwrap();
    let env = json!({"event_id": "e-9", "type": "post_message", "actor_handle": "u2", "payload": {"channel": "general", "text": "hi"}});
    h.call("POST", "/api/v1/adapters/sandbox/events", Some(&adapter), Some(env)).await;
    let slug = h.data.communities().unwrap()[0].clone();
    let (events, _) = read_log(&h.data.community_dir(&slug).join(LOG_FILE)).unwrap();
    let accepted = events.iter().filter(|e| e.kind == EventKind::CommandAccepted).count();
    assert_eq!(accepted, 4);
    // Each command's records follow its acceptance record.
    let mut open = false;
    for e in &events[1..] {
        if e.kind == EventKind::CommandAccepted {
            open = true;
        }
        assert!(open, "{:?} outside a command", e.kind);
    }
}
