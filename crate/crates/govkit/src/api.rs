//! HTTP API under `/api/v1`. Every write goes through `Node::apply`; the
//! handlers themselves never touch engine state.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use govkit_core::engine::{BundleRequest, Command, EngineEvent, EventKind, Reply, SubmitRequest};
use govkit_core::ids::{ActionId, DocumentId, PolicyId, UserId};
use govkit_core::model::{Action, Community, PermissionKind, Policy, VoteValue};
use govkit_core::time::Timestamp;
use govkit_core::{ErrorCode, FieldError, GovError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::datadir::{CommunitySpec, DataDir, Scope, TokenRecord, TokenStore};
use crate::node::{AuditQuery, Node};
use crate::webhook::{self, Envelope, SIGNATURE_HEADER};

/// Upper bound on a long poll.
const MAX_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub field_errors: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> ApiError {
        ApiError { status, code: code.into(), message: message.into(), field_errors: Vec::new() }
    }

    fn unauthorized() -> ApiError {
        ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "a valid bearer token is required")
    }

    fn forbidden(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::FORBIDDEN, ErrorCode::Forbidden.as_str(), msg)
    }

    fn bad_request(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidInput.as_str(), msg)
    }

    fn not_found(msg: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, ErrorCode::NotFound.as_str(), msg)
    }
}

/// HTTP status for each engine error code.
pub fn status_for(code: ErrorCode) -> StatusCode {
    use ErrorCode::*;
    match code {
        InvalidInput => StatusCode::BAD_REQUEST,
        NotFound => StatusCode::NOT_FOUND,
        Forbidden => StatusCode::FORBIDDEN,
        Conflict | StaleVote | ClockRegression | LastConstitutionPolicy | GovernanceLockout | NoUndoRecord
        | DependentState => StatusCode::CONFLICT,
        UnknownActionType | SchemaViolation | SyntaxError | MissingFunction | UnknownIdentifier => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        ExecutionFailed => StatusCode::BAD_GATEWAY,
        Halted | StorageFailure => StatusCode::SERVICE_UNAVAILABLE,
        TypeError | BudgetExceeded | CapabilityDenied | RuntimeError => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<GovError> for ApiError {
    fn from(e: GovError) -> ApiError {
        ApiError { status: status_for(e.code), code: e.code.as_str().into(), message: e.message, field_errors: e.field_errors }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status;
        let mut body = serde_json::to_value(&self).expect("errors serialize");
        body["status"] = json!(status.as_u16());
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct Hosted {
    node: Mutex<Node>,
}

/// `(community, user, Idempotency-Key header)`.
type IdempotencyKey = (String, String, String);

pub struct AppState {
    data: DataDir,
    communities: RwLock<BTreeMap<String, Arc<Hosted>>>,
    tokens: Mutex<TokenStore>,
    idempotency: Mutex<HashMap<IdempotencyKey, (StatusCode, Value)>>,
    clock: Box<dyn Fn() -> Timestamp + Send + Sync>,
    /// Bumped after every applied command; long polls wait on it.
    changed: tokio::sync::watch::Sender<u64>,
}

pub fn wall_clock() -> Timestamp {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    Timestamp::from_millis(ms)
}

impl AppState {
    /// Opens every community in `data`.
    pub fn open(data: DataDir, clock: Box<dyn Fn() -> Timestamp + Send + Sync>) -> Result<Arc<AppState>, GovError> {
        let mut communities = BTreeMap::new();
        for slug in data.communities()? {
            let node = data.open_community(&slug)?;
            communities.insert(slug, Arc::new(Hosted { node: Mutex::new(node) }));
        }
        let tokens = data.load_tokens()?;
        Ok(Arc::new(AppState {
            data,
            communities: RwLock::new(communities),
            tokens: Mutex::new(tokens),
            idempotency: Mutex::new(HashMap::new()),
            clock,
            changed: tokio::sync::watch::channel(0).0,
        }))
    }

    fn hosted(&self, slug: &str) -> ApiResult<Arc<Hosted>> {
        self.communities
            .read()
            .expect("community map lock")
            .get(slug)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no community `{slug}`")))
    }

    fn slugs(&self) -> Vec<String> {
        self.communities.read().expect("community map lock").keys().cloned().collect()
    }

    fn bump(&self) {
        self.changed.send_modify(|n| *n += 1);
    }

    /// Applies a command on a blocking thread: adapters may do network I/O.
    async fn apply(self: &Arc<Self>, slug: &str, cmd: Command) -> ApiResult<Reply> {
        let hosted = self.hosted(slug)?;
        let at = (self.clock)();
        let st = self.clone();
        let res = tokio::task::spawn_blocking(move || {
            let mut node = hosted.node.lock().expect("node lock");
            let r = node.apply_now(at, cmd);
            st.bump();
            r
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
        Ok(res?)
    }

    /// Runs `f` against a community's node under its lock.
    fn read<T>(&self, slug: &str, f: impl FnOnce(&Node) -> ApiResult<T>) -> ApiResult<T> {
        let hosted = self.hosted(slug)?;
        let node = hosted.node.lock().expect("node lock");
        f(&node)
    }

    /// Ticks every community once.
    pub fn tick_all(&self) {
        let at = (self.clock)();
        for slug in self.slugs() {
            if let Ok(h) = self.hosted(&slug) {
                let mut node = h.node.lock().expect("node lock");
                if let Err(e) = node.apply_now(at, Command::Tick) {
                    eprintln!("tick {slug}: {e}");
                }
            }
        }
        self.bump();
    }

    pub fn flush_all(&self) {
        for slug in self.slugs() {
            if let Ok(h) = self.hosted(&slug) {
                if let Err(e) = h.node.lock().expect("node lock").flush() {
                    eprintln!("flush {slug}: {e}");
                }
            }
        }
    }
}

/// Who is calling: a member of one community, or an operator.
#[derive(Debug, Clone)]
struct Caller {
    record: TokenRecord,
}

impl Caller {
    fn member(&self) -> ApiResult<(String, UserId)> {
        match (&self.record.community, &self.record.user, self.record.scopes.contains(&Scope::Member)) {
            (Some(c), Some(u), true) => Ok((c.0.clone(), u.clone())),
            _ => Err(ApiError::forbidden("this endpoint needs a member token")),
        }
    }
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    let raw = headers.get("authorization").and_then(|v| v.to_str().ok()).ok_or_else(ApiError::unauthorized)?;
    let secret = raw.strip_prefix("Bearer ").ok_or_else(ApiError::unauthorized)?.trim();
    let tokens = state.tokens.lock().expect("token lock");
    let record = tokens.find(secret).cloned().ok_or_else(ApiError::unauthorized)?;
    Ok(Caller { record })
}

fn can_view(c: &Community, user: &UserId, action_type: &str) -> bool {
    c.check_permission(user, PermissionKind::View, action_type).unwrap_or(false)
}

fn require_view(c: &Community, user: &UserId, action_type: &str) -> ApiResult<()> {
    if can_view(c, user, action_type) {
        Ok(())
    } else {
        Err(ApiError::forbidden(format!("{user} lacks VIEW on {action_type}")))
    }
}

/// Policies are readable with VIEW on `PolicyAdd`, documents with VIEW on `DocumentEdit`.
const POLICY_VIEW_TYPE: &str = "PolicyAdd";
const DOCUMENT_VIEW_TYPE: &str = "DocumentEdit";

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/communities", post(create_community))
        .route("/api/v1/action-types", get(list_action_types))
        .route("/api/v1/actions", get(list_actions).post(propose))
        .route("/api/v1/actions/{id}", get(get_action))
        .route("/api/v1/actions/{id}/wait", get(wait_action))
        .route("/api/v1/actions/{id}/votes", post(cast_vote))
        .route("/api/v1/policies", get(list_policies))
        .route("/api/v1/policies/{id}", get(get_policy))
        .route("/api/v1/documents", get(list_documents))
        .route("/api/v1/documents/{id}", get(get_document).put(put_document))
        .route("/api/v1/audit", get(audit))
        .route("/api/v1/adapters/{platform}/events", post(adapter_event))
        .with_state(state)
}

/// Serves until SIGINT/SIGTERM, ticking every `tick_period`, then flushes logs.
pub async fn serve(data: DataDir, listen: &str, tick_period: Duration) -> anyhow::Result<()> {
    let state = AppState::open(data, Box::new(wall_clock))?;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr: SocketAddr = listener.local_addr()?;
    println!("govkit listening on http://{addr}/api/v1");
    let ticker = {
        let st = state.clone();
        tokio::spawn(async move {
            let mut iv = tokio::time::interval(tick_period);
            iv.tick().await;
            loop {
                iv.tick().await;
                let st = st.clone();
                let _ = tokio::task::spawn_blocking(move || st.tick_all()).await;
            }
        })
    };
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    ticker.abort();
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.flush_all()).await?;
    println!("govkit stopped; logs flushed");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

async fn create_community(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let who = caller(&st, &headers)?;
    if !who.record.scopes.contains(&Scope::AdminInstall) {
        return Err(ApiError::forbidden("creating communities needs an admin-install token"));
    }
    let spec: CommunitySpec = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let st2 = st.clone();
    let (node, issued) = tokio::task::spawn_blocking(move || {
        // Token file and community directory are written together.
        let _guard = st2.tokens.lock().expect("token lock");
        st2.data.create_community(&spec, Timestamp::EPOCH)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))??;
    *st.tokens.lock().expect("token lock") = st.data.load_tokens()?;
    let slug = issued.community.0.clone();
    st.communities.write().expect("community map lock").insert(slug.clone(), Arc::new(Hosted { node: Mutex::new(node) }));
    let members: Map<String, Value> = issued.members.iter().map(|(u, t)| (u.0.clone(), json!(t))).collect();
    Ok((
        StatusCode::CREATED,
        Json(json!({"community": slug, "member_tokens": members, "adapter_token": issued.adapter})),
    ))
}

async fn list_action_types(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let c = node.engine().community();
        let types: Vec<Value> = c
            .action_types
            .values()
            .filter(|t| can_view(c, &user, &t.name))
            .map(|t| {
                let schema = govkit_core::catalog::payload_schema(&t.name)
                    .or_else(|| node.engine().platform().descriptor().action_type(&t.name).map(|p| p.schema.clone()));
                json!({
                    "name": t.name,
                    "layer": t.layer,
                    "can_propose": c.check_permission(&user, PermissionKind::Propose, &t.name).unwrap_or(false),
                    "schema": schema,
                })
            })
            .collect();
        Ok(Json(json!({"action_types": types})))
    })
}

fn action_resource(node: &Node, a: &Action) -> Value {
    let st = node.engine().state();
    let decision = node
        .events()
        .iter()
        .rev()
        .filter(|e| e.action.as_ref() == Some(&a.id))
        .find_map(EngineEvent::decision);
    json!({
        "id": a.id,
        "action_type": a.action_type,
        "layer": a.layer,
        "initiator": a.initiator,
        "origin": a.origin,
        "payload": a.payload,
        "status": a.proposal.status,
        "governing_policy": a.proposal.governing_policy,
        "created_at": a.proposal.created_at,
        "decided_at": a.proposal.decided_at,
        "datetime_trigger": a.datetime_trigger,
        "in_effect": a.in_effect,
        "bundle": a.bundle,
        "member_of": a.member_of,
        "tally": st.tally(&a.id),
        "votes": a.proposal.votes,
        "data": a.data,
        "decision": decision,
    })
}

#[derive(Debug, Default, Deserialize)]
struct ListActions {
    status: Option<String>,
    limit: Option<usize>,
}

async fn list_actions(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ListActions>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let limit = q.limit.unwrap_or(100).clamp(1, 1000);
    st.read(&slug, |node| {
        let c = node.engine().community();
        let out: Vec<Value> = node
            .engine()
            .state()
            .actions
            .iter()
            .rev()
            .filter(|a| q.status.as_deref().is_none_or(|s| a.proposal.status.as_str() == s))
            .filter(|a| can_view(c, &user, &a.action_type))
            .take(limit)
            .map(|a| action_resource(node, a))
            .collect();
        Ok(Json(json!({"actions": out})))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposeBody {
    action_type: String,
    #[serde(default)]
    payload: Map<String, Value>,
    #[serde(default)]
    datetime_trigger: Option<Timestamp>,
    #[serde(default)]
    bundle: Option<BundleRequest>,
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string)
}

fn submitted(reply: Reply) -> (StatusCode, Value) {
    match reply {
        Reply::Submitted { action, status, decisions } => {
            (StatusCode::ACCEPTED, json!({"action": action, "status": status, "decisions": decisions}))
        }
        Reply::Ignored { reason } => (StatusCode::OK, json!({"ignored": reason})),
        other => (StatusCode::OK, serde_json::to_value(other).expect("replies serialize")),
    }
}

/// Submits through the engine, replaying the stored answer for a repeated
/// `Idempotency-Key`.
async fn submit_idempotent(
    st: &Arc<AppState>,
    slug: &str,
    user: &UserId,
    key: Option<String>,
    req: SubmitRequest,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let k = key.map(|k| (slug.to_string(), user.0.clone(), k));
    if let Some(k) = &k {
        if let Some((s, body)) = st.idempotency.lock().expect("idempotency lock").get(k) {
            return Ok((*s, Json(body.clone())));
        }
    }
    let (status, body) = submitted(st.apply(slug, Command::Submit(req)).await?);
    if let Some(k) = k {
        st.idempotency.lock().expect("idempotency lock").insert(k, (status, body.clone()));
    }
    Ok((status, Json(body)))
}

async fn propose(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let b: ProposeBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let req = SubmitRequest {
        initiator: user.clone(),
        action_type: b.action_type,
        payload: b.payload,
        datetime_trigger: b.datetime_trigger,
        bundle: b.bundle,
    };
    submit_idempotent(&st, &slug, &user, idempotency_key(&headers), req).await
}

fn find_action<'n>(node: &'n Node, id: &str) -> ApiResult<&'n Action> {
    node.engine().state().action(&ActionId::from(id)).ok_or_else(|| ApiError::not_found(format!("no action {id}")))
}

async fn get_action(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let a = find_action(node, &id)?;
        require_view(node.engine().community(), &user, &a.action_type)?;
        Ok(Json(action_resource(node, a)))
    })
}

#[derive(Debug, Default, Deserialize)]
struct WaitQuery {
    /// Return once the status differs from this; the current status by default.
    status: Option<String>,
    timeout_ms: Option<u64>,
}

async fn wait_action(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let mut rx = st.changed.subscribe();
    let snapshot = |st: &AppState| {
        st.read(&slug, |node| {
            let a = find_action(node, &id)?;
            require_view(node.engine().community(), &user, &a.action_type)?;
            Ok((a.proposal.status.as_str().to_string(), action_resource(node, a)))
        })
    };
    let (first, body) = snapshot(&st)?;
    let from = q.status.unwrap_or(first);
    if body["status"] != json!(from) {
        return Ok(Json(body));
    }
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.timeout_ms.unwrap_or(30_000)).min(MAX_WAIT);
    loop {
        tokio::select! {
            r = rx.changed() => {
                if r.is_err() {
                    break;
                }
                let (status, body) = snapshot(&st)?;
                if status != from {
                    return Ok(Json(body));
                }
            }
            _ = tokio::time::sleep_until(deadline) => break,
        }
    }
    Ok(Json(snapshot(&st)?.1))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteBody {
    #[serde(default)]
    value: Option<bool>,
    #[serde(default)]
    choice: Option<u32>,
}

async fn cast_vote(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let b: VoteBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let value = match (b.value, b.choice) {
        (Some(v), None) => VoteValue::Boolean(v),
        (None, Some(c)) => VoteValue::Choice(c),
        _ => return Err(ApiError::bad_request("give exactly one of `value` (yes/no) or `choice` (option number)")),
    };
    st.read(&slug, |node| {
        let a = find_action(node, &id)?;
        require_view(node.engine().community(), &user, &a.action_type)
    })?;
    match st.apply(&slug, Command::Vote { voter: user, action: ActionId::from(id.as_str()), value }).await? {
        Reply::Voted { action, tally, status, .. } => Ok(Json(json!({"action": action, "tally": tally, "status": status}))),
        other => Ok(Json(serde_json::to_value(other).expect("replies serialize"))),
    }
}

fn policy_resource(p: &Policy) -> Value {
    json!({
        "id": p.id,
        "name": p.name,
        "description": p.description,
        "layer": p.layer,
        "precedence": p.precedence,
        "trial_mode": p.trial_mode || govkit_core::dsl::parse_policy_source(&p.source).is_ok_and(|g| g.is_trial()),
        "enacted_at": p.enacted_at,
        "stage": p.stage,
        "data": p.data,
        "source": p.source,
    })
}

async fn list_policies(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let c = node.engine().community();
        require_view(c, &user, POLICY_VIEW_TYPE)?;
        Ok(Json(json!({"policies": c.policies.iter().map(policy_resource).collect::<Vec<_>>()})))
    })
}

async fn get_policy(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let c = node.engine().community();
        require_view(c, &user, POLICY_VIEW_TYPE)?;
        let p = node
            .engine()
            .state()
            .policy(&PolicyId::from(id.as_str()))
            .ok_or_else(|| ApiError::not_found(format!("no policy {id}")))?;
        Ok(Json(policy_resource(p)))
    })
}

async fn list_documents(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let c = node.engine().community();
        require_view(c, &user, DOCUMENT_VIEW_TYPE)?;
        Ok(Json(json!({"documents": c.documents})))
    })
}

async fn get_document(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    st.read(&slug, |node| {
        let c = node.engine().community();
        require_view(c, &user, DOCUMENT_VIEW_TYPE)?;
        let d = c.document(&DocumentId::from(id.as_str())).ok_or_else(|| ApiError::not_found(format!("no document {id}")))?;
        let history: Vec<_> =
            node.engine().state().document_history.iter().filter(|r| r.document == d.id).collect();
        Ok(Json(json!({"document": d, "history": history})))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentBody {
    #[serde(default)]
    title: Option<String>,
    body: String,
}

/// Proposes a `DocumentEdit`; the document changes only if governance passes it.
async fn put_document(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let b: DocumentBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mut payload = Map::new();
    payload.insert("document".into(), json!(id));
    payload.insert("body".into(), json!(b.body));
    if let Some(t) = b.title {
        payload.insert("title".into(), json!(t));
    }
    let req = SubmitRequest {
        initiator: user.clone(),
        action_type: govkit_core::catalog::DOCUMENT_EDIT.into(),
        payload,
        datetime_trigger: None,
        bundle: None,
    };
    submit_idempotent(&st, &slug, &user, idempotency_key(&headers), req).await
}

#[derive(Debug, Default, Deserialize)]
struct AuditParams {
    action: Option<String>,
    policy: Option<String>,
    kind: Option<String>,
    since: Option<String>,
    until: Option<String>,
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn audit(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(p): Query<AuditParams>,
) -> ApiResult<Json<Value>> {
    let (slug, user) = caller(&st, &headers)?.member()?;
    let ts = |s: &Option<String>| -> ApiResult<Option<Timestamp>> {
        s.as_deref().map(Timestamp::parse).transpose().map_err(ApiError::bad_request)
    };
    let kind = match &p.kind {
        None => None,
        Some(k) => Some(EventKind::parse(k).ok_or_else(|| ApiError::bad_request(format!("unknown event kind `{k}`")))?),
    };
    let q = AuditQuery {
        action: p.action.as_deref().map(ActionId::from),
        policy: p.policy.as_deref().map(PolicyId::from),
        kind,
        since: ts(&p.since)?,
        until: ts(&p.until)?,
        cursor: p.cursor.clone(),
        limit: p.limit.unwrap_or(100),
    };
    st.read(&slug, |node| {
        let mut page = node.query_audit(&q)?;
        let c = node.engine().community();
        let state = node.engine().state();
        // Records about actions the caller cannot see are withheld.
        page.events.retain(|e| match &e.action {
            Some(a) => state.action(a).is_none_or(|a| can_view(c, &user, &a.action_type)),
            None => true,
        });
        Ok(Json(serde_json::to_value(page).expect("pages serialize")))
    })
}

/// Bridge ingress. Accepts an HMAC-signed envelope for a webhook community,
/// or an adapter-scoped bearer token.
async fn adapter_event(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(platform): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let slug = match headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()) {
        Some(sig) => {
            let mut found = None;
            for slug in st.slugs() {
                if let Some(cfg) = st.data.adapter_config(&slug)? {
                    if cfg.platform == platform && webhook::verify(&cfg.secret, &body, sig) {
                        found = Some(slug);
                        break;
                    }
                }
            }
            found.ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "signature does not verify"))?
        }
        None => {
            let who = caller(&st, &headers)?;
            match (&who.record.community, who.record.scopes.contains(&Scope::Adapter)) {
                (Some(c), true) => c.0.clone(),
                _ => return Err(ApiError::forbidden("adapter events need a signature or an adapter token")),
            }
        }
    };
    let adapter = st.read(&slug, |node| Ok(node.engine().community().adapter.clone()))?;
    if adapter != platform {
        return Err(ApiError::not_found(format!("community `{slug}` is not on `{platform}`")));
    }
    let env: Envelope = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let cmd = env.into_command()?;
    let reply = st.apply(&slug, cmd).await?;
    let (status, body) = submitted(reply);
    Ok((status, Json(body)))
}
