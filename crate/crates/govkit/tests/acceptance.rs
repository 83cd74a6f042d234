//! One line per acceptance criterion. Scenario criteria run the bundled
//! scripts under the simulated clock; 10 and 11 drive the engine directly.
//! Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use govkit::api::{router, AppState};
use govkit::datadir::{CommunitySpec, DataDir, MemberEntry};
use govkit::scenario::{load, run, RunOptions};
use govkit_core::bootstrap::{bootstrap_community, seed_change};
use govkit_core::catalog::{self, ExecCtx, ExecOutput};
use govkit_core::ids::{ActionId, UserId};
use govkit_core::model::{Action, Community, DataStore, Layer, Origin, Proposal, User};
use govkit_core::platform::{sandbox_descriptor, SandboxPlatform, PIN_MESSAGE, POST_MESSAGE};
use govkit_core::time::{Span, Timestamp};
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value as Json};
use tower::ServiceExt;

/// Wall-clock limits, pinned.
const SCENARIO_LIMIT: Duration = Duration::from_secs(1);
const REVERT_LIMIT: Duration = Duration::from_secs(10);
const REVERT_CASES: usize = 1000;
const PARALLEL_ACTIONS: usize = 100;

const T0: Timestamp = Timestamp::from_millis(1_704_067_200_000);

type Outcome = Result<String, String>;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios")
}

fn scenario(file: &str) -> Outcome {
    let loaded = load(&scenarios_dir().join(file)).map_err(|e| e.to_string())?;
    let rep = run(&loaded, &RunOptions::default()).map_err(|e| e.to_string())?;
    let summary = format!("{file}: {} assertions", rep.assertions.passed);
    if rep.passed {
        Ok(summary)
    } else {
        let first = rep.steps.iter().find(|s| !s.ok).and_then(|s| s.detail.clone()).unwrap_or_default();
        Err(format!("{summary}, {} failed; first: {first}", rep.assertions.failed))
    }
}

fn scenarios(files: &[&str]) -> Outcome {
    let mut parts = Vec::new();
    for f in files {
        parts.push(scenario(f)?);
    }
    Ok(parts.join("; "))
}

/// Completeness and replay over every bundled script.
fn audit_and_replay() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    files.sort();
    let mut records = 0;
    for f in &files {
        let rep = run(&load(f).map_err(|e| e.to_string())?, &RunOptions::default()).map_err(|e| e.to_string())?;
        let name = f.file_name().unwrap().to_string_lossy();
        if !rep.completeness.ok {
            return Err(format!("{name}: completeness: {}", rep.completeness.detail));
        }
        if !rep.replay.ok {
            return Err(format!("{name}: replay: {}", rep.replay.detail));
        }
        records += rep.audit_log.len();
    }
    Ok(format!("{} scenarios, {records} records replayed byte-identically", files.len()))
}

const TRIVIAL: &str = "def filter(action, policy) { return true }
def initialize(action, policy) {}
def check(action, policy) { return PASSED }
def notify(action, policy) {}
def pass(action, policy) { action.execute() }
def fail(action, policy) {}
";

fn members(n: usize) -> Vec<User> {
    (1..=n)
        .map(|i| {
            let mut u = User::new(format!("u{i}"));
            u.platform_handle = format!("u{i}");
            u
        })
        .collect()
}

/// Four members, a Steward role, one extra policy per layer and one document.
fn seeded() -> Community {
    let mut c = bootstrap_community("Revert Commons", members(4), 1, &sandbox_descriptor(), T0).unwrap();
    let mut seed = |t, label, p| seed_change(&mut c, t, label, p, T0).unwrap();
    seed(catalog::ROLE_ADD, "r", json!({"name": "Steward", "permissions": [{"action_type": "PolicyAdd", "kind": "PROPOSE"}]}));
    seed(catalog::ROLE_ADD_MEMBER, "m", json!({"role": "Steward", "user": "u1"}));
    seed(catalog::POLICY_ADD, "plat", json!({"name": "plat", "layer": "PLATFORM", "source": TRIVIAL}));
    seed(catalog::POLICY_ADD, "cons", json!({"name": "cons", "layer": "CONSTITUTION", "source": TRIVIAL}));
    seed(catalog::DOCUMENT_ADD, "d", json!({"title": "Rules", "body": "be kind"}));
    c
}

fn constitution_payload(c: &Community, t: &str, rng: &mut StdRng, n: usize) -> Json {
    let pick = |rng: &mut StdRng, v: &[String]| v[rng.gen_range(0..v.len())].clone();
    let roles: Vec<String> = c.roles.values().map(|r| r.name.clone()).collect();
    let users: Vec<String> = c.members.iter().map(|u| u.to_string()).collect();
    let policies: Vec<String> = c.policies.iter().filter(|p| p.stage.is_none()).map(|p| p.id.to_string()).collect();
    let docs: Vec<String> = c.documents.iter().map(|d| d.id.to_string()).collect();
    let types: Vec<String> = catalog::CONSTITUTION_TYPES.iter().map(|s| s.to_string()).collect();
    let kind = ["VIEW", "PROPOSE", "EXECUTE"][rng.gen_range(0..3)];
    let role = pick(rng, &roles);
    let perm = pick(rng, &types);
    match t {
        catalog::POLICY_ADD => json!({"name": format!("pol{n}"), "layer": (["PLATFORM", "CONSTITUTION"][rng.gen_range(0..2)]), "source": TRIVIAL, "precedence": rng.gen_range(0..3)}),
        catalog::POLICY_EDIT => json!({"policy": pick(rng, &policies), "source": TRIVIAL.replace("PASSED", "FAILED")}),
        catalog::POLICY_REMOVE => json!({"policy": pick(rng, &policies)}),
        catalog::POLICY_BUNDLE_ADD => json!({"name": format!("bundle{n}"), "layer": "PLATFORM", "stages": [{"name": format!("s{n}a"), "source": TRIVIAL}, {"name": format!("s{n}b"), "source": TRIVIAL}]}),
        catalog::ROLE_ADD => json!({"name": format!("Role{n}"), "permissions": [{"action_type": perm, "kind": kind}]}),
        catalog::ROLE_REMOVE => json!({"role": role}),
        catalog::ROLE_GRANT_PERMISSION | catalog::ROLE_REVOKE_PERMISSION => json!({"role": role, "action_type": perm, "kind": kind}),
        catalog::ROLE_ADD_MEMBER | catalog::ROLE_REMOVE_MEMBER => json!({"role": role, "user": pick(rng, &users)}),
        catalog::DOCUMENT_ADD => json!({"title": format!("Doc {n}"), "body": "text"}),
        catalog::DOCUMENT_EDIT => json!({"document": pick(rng, &docs), "title": format!("T{n}"), "body": format!("v{n}")}),
        catalog::DOCUMENT_REMOVE => json!({"document": pick(rng, &docs)}),
        _ => json!({"default_disposition": (["allow", "deny"][rng.gen_range(0..2)]), "tick_period": format!("{}m", rng.gen_range(1..6))}),
    }
}

fn sandbox_payload(p: &SandboxPlatform, t: &str, rng: &mut StdRng) -> Json {
    let chans: Vec<&String> = p.state.channels.keys().collect();
    let ch = chans[rng.gen_range(0..chans.len())].clone();
    let msgs: Vec<&String> = p.state.channels[&ch].messages.iter().map(|m| &m.id).collect();
    let msg = if msgs.is_empty() { "m-none".to_string() } else { msgs[rng.gen_range(0..msgs.len())].clone() };
    let word: String = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    match t {
        POST_MESSAGE => json!({"channel": ch, "text": word}),
        "delete_message" | PIN_MESSAGE => json!({"channel": ch, "message": msg}),
        "rename_channel" => json!({"old": ch, "new": word}),
        "set_topic" => json!({"channel": ch, "topic": word}),
        "create_channel" => json!({"name": word}),
        "join_channel" | "leave_channel" => json!({"channel": ch}),
        _ => json!({"user": format!("u{}", rng.gen_range(1..4)), "flag": word, "value": rng.gen_bool(0.5)}),
    }
}

fn platform_action(n: usize, t: &str, payload: Json) -> Action {
    Action {
        id: ActionId(format!("a-{n}")),
        action_type: t.into(),
        layer: Layer::Platform,
        initiator: UserId::from("u1"),
        payload: match payload {
            Json::Object(m) => m,
            _ => Map::new(),
        },
        proposal: Proposal::new(T0),
        data: DataStore::default(),
        datetime_trigger: None,
        origin: Origin::WebProposal,
        bundle: None,
        member_of: None,
        in_effect: false,
        undo: None,
    }
}

/// Randomized execute-then-revert over every type. Each case first applies
/// a random prefix so the target runs against varied states; only cases
/// whose target executes count toward the total.
fn revert_identity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let sandbox_types: Vec<String> = sandbox_descriptor().action_types.iter().map(|t| t.name.clone()).collect();
    let cons_types: Vec<&str> = catalog::CONSTITUTION_TYPES.to_vec();
    let mut counted = 0;
    let mut per_type = std::collections::BTreeMap::<String, usize>::new();
    let mut attempt = 0usize;
    while counted < REVERT_CASES || per_type.len() < sandbox_types.len() + cons_types.len() {
        attempt += 1;
        if attempt > REVERT_CASES * 20 {
            return Err(format!("only {counted} executable cases after {attempt} attempts; per type {per_type:?}"));
        }
        let slot = attempt % (sandbox_types.len() + cons_types.len());
        if slot < sandbox_types.len() {
            let t = &sandbox_types[slot];
            let c = bootstrap_community("S", members(3), 1, &sandbox_descriptor(), T0).unwrap();
            let mut p = govkit::datadir::sandbox_for(&c, &["general".into(), "random".into()]);
            for i in 0..rng.gen_range(0..6) {
                let pt = &sandbox_types[rng.gen_range(0..sandbox_types.len())];
                let pl = sandbox_payload(&p, pt, &mut rng);
                let _ = p.apply(&platform_action(100 + i, pt, pl));
            }
            let before = serde_json::to_vec(&p.state).unwrap();
            let pl = sandbox_payload(&p, t, &mut rng);
            let Ok(undo) = p.apply(&platform_action(1, t, pl.clone())) else {
                if serde_json::to_vec(&p.state).unwrap() != before {
                    return Err(format!("failed {t} {pl} changed state"));
                }
                continue;
            };
            p.unapply(&undo).map_err(|e| format!("{t}: revert failed: {e}"))?;
            if serde_json::to_vec(&p.state).unwrap() != before {
                return Err(format!("{t} {pl}: revert did not restore the sandbox"));
            }
            *per_type.entry(t.clone()).or_default() += 1;
        } else {
            let t = cons_types[slot - sandbox_types.len()];
            let mut c = seeded();
            let mut seq = 100;
            for i in 0..rng.gen_range(0..5) {
                let pt = cons_types[rng.gen_range(0..cons_types.len())];
                let pl = constitution_payload(&c, pt, &mut rng, 100 + i);
                let id = ActionId(format!("a-{}", 100 + i));
                let mut ctx = ExecCtx { action: &id, now: T0, next_enact_seq: &mut seq };
                let _ = catalog::execute(&mut c, pt, pl.as_object().unwrap(), &mut ctx, &mut ExecOutput::default());
            }
            let before = serde_json::to_vec(&c).unwrap();
            let pl = constitution_payload(&c, t, &mut rng, attempt);
            let id = ActionId(format!("a-{attempt}"));
            let mut ctx = ExecCtx { action: &id, now: T0 + Span::minutes(1), next_enact_seq: &mut seq };
            let undo = match catalog::execute(&mut c, t, pl.as_object().unwrap(), &mut ctx, &mut ExecOutput::default()) {
                Ok(u) => catalog::undo_from_json(&catalog::undo_to_json(&u)).map_err(|e| e.to_string())?,
                Err(_) => {
                    if serde_json::to_vec(&c).unwrap() != before {
                        return Err(format!("failed {t} {pl} changed state"));
                    }
                    continue;
                }
            };
            catalog::revert(&mut c, &undo, &id, T0 + Span::minutes(2), &mut ExecOutput::default())
                .map_err(|e| format!("{t}: revert failed: {e}"))?;
            if serde_json::to_vec(&c).unwrap() != before {
                return Err(format!("{t} {pl}: revert did not restore the community"));
            }
            *per_type.entry(t.to_string()).or_default() += 1;
        }
        counted += 1;
    }
    let fewest = per_type.values().min().copied().unwrap_or(0);
    Ok(format!("{counted} cases over {} types (fewest per type: {fewest})", per_type.len()))
}

const SPAM_FILTER: &str = r#"
def filter(action, policy) {
    return action.action_type == "post_message"
}
def initialize(action, policy) {}
def check(action, policy) {
    if "spam" in action.payload["text"] {
        return FAILED
    }
    return PASSED
}
def notify(action, policy) {}
def pass(action, policy) {}
def fail(action, policy) {
    action.revert()
}
"#;

/// A community behind the HTTP router with a platform policy enacted
/// through the API; returns the router, the adapter token and the data dir.
async fn governed_service(dir: &Path) -> Result<(axum::Router, String, DataDir), String> {
    let data = DataDir::new(dir.join("data"));
    let spec = CommunitySpec {
        name: "Parallel".into(),
        members: (1..=3)
            .map(|i| MemberEntry { id: format!("u{i}"), display_name: None, handle: Some(format!("u{i}")), attributes: Map::new() })
            .collect(),
        seed: 1,
        adapter: None,
        channels: Vec::new(),
    };
    let (node, tokens) = data.init(&spec, T0).map_err(|e| e.to_string())?;
    drop(node);
    let clock = Arc::new(AtomicI64::new(T0.as_millis()));
    let state = AppState::open(data.clone(), Box::new(move || Timestamp::from_millis(clock.load(Ordering::SeqCst))))
        .map_err(|e| e.to_string())?;
    let app = router(state);
    let tok = |u: &str| tokens.members.iter().find(|(m, _)| m.as_str() == u).unwrap().1.clone();
    let (s, b) = call(&app, "/api/v1/actions", &tok("u1"), json!({"action_type": "PolicyAdd", "payload": {"name": "spam", "layer": "PLATFORM", "source": SPAM_FILTER}})).await;
    if s != StatusCode::ACCEPTED {
        return Err(format!("policy proposal: {s} {b}"));
    }
    let id = b["action"].as_str().unwrap().to_string();
    for u in ["u1", "u2"] {
        call(&app, &format!("/api/v1/actions/{id}/votes"), &tok(u), json!({"value": true})).await;
    }
    Ok((app, tokens.adapter.unwrap(), data))
}

async fn call(app: &axum::Router, uri: &str, token: &str, body: Json) -> (StatusCode, Json) {
    let req = Request::post(uri)
        .header("authorization", format!("Bearer {token}"))
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(&body).unwrap()))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Json::Null))
}

fn message_event(i: usize) -> Json {
    let text = if i.is_multiple_of(3) { format!("spam offer {i}") } else { format!("note {i}") };
    json!({"event_id": format!("e-{i}"), "type": "post_message", "actor_handle": format!("u{}", 1 + i % 3),
           "payload": {"channel": "general", "text": text}})
}

/// `(text, status, basis, policy)`.
type Decided = (String, String, String, String);

/// Decision per message text, plus the surviving messages, sorted.
fn outcome(data: &DataDir) -> Result<(Vec<Decided>, Vec<String>), String> {
    let slug = data.communities().map_err(|e| e.to_string())?.remove(0);
    let node = data.open_community(&slug).map_err(|e| e.to_string())?;
    let st = node.engine().state();
    let mut decisions = Vec::new();
    for d in node.events().iter().filter_map(|e| e.decision()) {
        let a = st.action(&d.action).ok_or("decided action missing")?;
        if a.action_type == POST_MESSAGE {
            let text = a.payload["text"].as_str().unwrap_or_default().to_string();
            let policy = d.policy.map(|p| p.to_string()).unwrap_or_default();
            decisions.push((text, d.status.as_str().to_string(), format!("{:?}", d.basis), policy));
        }
    }
    decisions.sort();
    let mut texts: Vec<String> = node.engine().platform().state()["channels"]["general"]["messages"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|m| m["text"].as_str().map(str::to_string))
        .collect();
    texts.sort();
    Ok((decisions, texts))
}

fn parallel_submission() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(8).enable_all().build().unwrap();
    rt.block_on(async {
        let serial_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (app, token, serial_data) = governed_service(serial_dir.path()).await?;
        for i in 0..PARALLEL_ACTIONS {
            let (s, b) = call(&app, "/api/v1/adapters/sandbox/events", &token, message_event(i)).await;
            if s != StatusCode::ACCEPTED {
                return Err(format!("serial event {i}: {s} {b}"));
            }
        }
        let par_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (app, token, par_data) = governed_service(par_dir.path()).await?;
        let barrier = Arc::new(tokio::sync::Barrier::new(PARALLEL_ACTIONS));
        let tasks: Vec<_> = (0..PARALLEL_ACTIONS)
            .map(|i| {
                let (app, token, barrier) = (app.clone(), token.clone(), barrier.clone());
                tokio::spawn(async move {
                    barrier.wait().await;
                    call(&app, "/api/v1/adapters/sandbox/events", &token, message_event(i)).await
                })
            })
            .collect();
        for (i, t) in tasks.into_iter().enumerate() {
            let (s, b) = t.await.map_err(|e| e.to_string())?;
            if s != StatusCode::ACCEPTED {
                return Err(format!("concurrent event {i}: {s} {b}"));
            }
        }
        drop(app);
        let serial = outcome(&serial_data)?;
        let parallel = outcome(&par_data)?;
        if serial.0.len() != PARALLEL_ACTIONS {
            return Err(format!("expected {PARALLEL_ACTIONS} message decisions, got {}", serial.0.len()));
        }
        if serial != parallel {
            return Err("concurrent decisions differ from serial decisions".into());
        }
        let failed = serial.0.iter().filter(|d| d.1 == "FAILED").count();
        Ok(format!("{PARALLEL_ACTIONS} messages, {failed} rejected, {} kept; decision sets equal", serial.1.len()))
    })
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "starter majority rule", limit: Some(SCENARIO_LIMIT), run: || scenario("starter.yaml") },
        Criterion { id: 2, name: "random jury", limit: Some(SCENARIO_LIMIT), run: || scenario("jury.yaml") },
        Criterion { id: 3, name: "steward election", limit: None, run: || scenario("election.yaml") },
        Criterion { id: 4, name: "two-round caucus", limit: None, run: || scenario("caucus.yaml") },
        Criterion { id: 5, name: "request for adminship", limit: None, run: || scenario("rfa.yaml") },
        Criterion {
            id: 6,
            name: "toxicity filter",
            limit: None,
            run: || scenarios(&["toxicity.yaml", "toxicity_no_allowlist.yaml"]),
        },
        Criterion { id: 7, name: "reputation and privilege", limit: None, run: || scenario("reputation.yaml") },
        Criterion { id: 8, name: "trial mode", limit: None, run: || scenario("trial.yaml") },
        Criterion { id: 9, name: "audit completeness and replay", limit: None, run: audit_and_replay },
        Criterion { id: 10, name: "revert identity", limit: Some(REVERT_LIMIT), run: revert_identity },
        Criterion { id: 11, name: "parallel submission", limit: None, run: parallel_submission },
        Criterion { id: 12, name: "runaway check", limit: None, run: || scenario("runaway.yaml") },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let mut res = (c.run)();
        let took = start.elapsed();
        if let (Ok(_), Some(limit)) = (&res, c.limit) {
            if took > limit {
                res = Err(format!("took {took:.2?}, limit {limit:.2?}"));
            }
        }
        let limit = c.limit.map(|l| format!(", limit {l:.0?}")).unwrap_or_default();
        match res {
            Ok(detail) => println!("PASS {:>2} {} ({took:.2?}{limit}): {detail}", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {} ({took:.2?}{limit}): {why}", c.id, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
