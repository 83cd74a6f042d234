//! Executing a constitution change and then reverting it leaves the
//! community exactly as it was; a stack of changes unwinds in reverse order.
//! Same for sandbox platform actions.

mod common;

use common::*;
use govkit_core::catalog::{self, ExecCtx, ExecOutput};
use govkit_core::ids::ActionId;
use govkit_core::model::{Action, Community, DataStore, Layer, Origin, Proposal};
use govkit_core::platform::SandboxPlatform;
use govkit_core::time::Span;
use proptest::prelude::*;
use serde_json::{json, Value as Json};

const TRIVIAL: &str = "def filter(action, policy) { return true }
def initialize(action, policy) {}
def check(action, policy) { return PASSED }
def notify(action, policy) {}
def pass(action, policy) { action.execute() }
def fail(action, policy) {}
";

fn mentions(role: &str) -> String {
    TRIVIAL.replace("return true", &format!("return len(users.filter(role=\"{role}\")) > 0"))
}

/// A payload for `kind`, choosing referents from the current community by `pick`.
fn payload(c: &Community, kind: usize, pick: usize, n: usize) -> (&'static str, Json) {
    // Prefer referents that can actually be removed, so removal paths get exercised.
    let mut roles: Vec<String> = c.roles.values().filter(|r| r.id != c.base_role).map(|r| r.name.clone()).collect();
    if roles.is_empty() {
        roles.push(c.base_role.to_string());
    }
    let role = &roles[pick % roles.len()];
    let users: Vec<String> = c.members.iter().map(|u| u.to_string()).collect();
    let user = &users[pick % users.len()];
    let mut policies: Vec<String> =
        c.policies.iter().filter(|p| p.stage.is_none() && p.id.as_str() != "p-starter").map(|p| p.id.to_string()).collect();
    if policies.is_empty() {
        policies.push("p-starter".into());
    }
    let policy = &policies[pick % policies.len()];
    let docs: Vec<String> = c.documents.iter().map(|d| d.id.to_string()).collect();
    let perm_type = catalog::CONSTITUTION_TYPES[pick % 14];
    let kind_name = ["VIEW", "PROPOSE", "EXECUTE"][pick % 3];
    match kind % 14 {
        0 => (catalog::POLICY_ADD, json!({"name": format!("pol{n}"), "layer": (["PLATFORM", "CONSTITUTION"][pick % 2]), "source": mentions(role), "precedence": pick as i64 % 3})),
        1 => (catalog::POLICY_EDIT, json!({"policy": policy, "source": TRIVIAL.replace("PASSED", "FAILED")})),
        2 => (catalog::POLICY_REMOVE, json!({"policy": policy})),
        3 => (catalog::POLICY_BUNDLE_ADD, json!({"name": format!("bundle{n}"), "layer": "PLATFORM", "stages": [{"name": format!("s{n}a"), "source": TRIVIAL}, {"name": format!("s{n}b"), "source": TRIVIAL}]})),
        4 => (catalog::ROLE_ADD, json!({"name": format!("Role{n}"), "permissions": [{"action_type": perm_type, "kind": kind_name}]})),
        5 => (catalog::ROLE_REMOVE, json!({"role": role})),
        6 => (catalog::ROLE_GRANT_PERMISSION, json!({"role": role, "action_type": perm_type, "kind": kind_name})),
        7 => (catalog::ROLE_REVOKE_PERMISSION, json!({"role": role, "action_type": perm_type, "kind": kind_name})),
        8 => (catalog::ROLE_ADD_MEMBER, json!({"role": role, "user": user})),
        9 => (catalog::ROLE_REMOVE_MEMBER, json!({"role": role, "user": user})),
        10 => (catalog::DOCUMENT_ADD, json!({"title": format!("Doc {n}"), "body": "text"})),
        11 => match docs.get(pick % docs.len().max(1)) {
            Some(d) => (catalog::DOCUMENT_EDIT, json!({"document": d, "title": format!("T{n}"), "body": format!("v{n}")})),
            None => (catalog::DOCUMENT_ADD, json!({"title": "again"})),
        },
        12 => match docs.get(pick % docs.len().max(1)) {
            Some(d) => (catalog::DOCUMENT_REMOVE, json!({"document": d})),
            None => (catalog::DOCUMENT_ADD, json!({"title": "again"})),
        },
        _ => (catalog::COMMUNITY_CONFIG_EDIT, json!({"default_disposition": (["allow", "deny"][pick % 2]), "tick_period": format!("{}m", 1 + pick % 5)})),
    }
}

/// Four members, a Steward role holding u1, and a second policy per layer.
fn seeded() -> Community {
    let mut c = community(4);
    let seed = |c: &mut Community, t, label, p| govkit_core::bootstrap::seed_change(c, t, label, p, T0).unwrap();
    seed(&mut c, catalog::ROLE_ADD, "r", json!({"name": "Steward", "permissions": [{"action_type": "PolicyAdd", "kind": "PROPOSE"}]}));
    seed(&mut c, catalog::ROLE_ADD_MEMBER, "m", json!({"role": "Steward", "user": "u1"}));
    seed(&mut c, catalog::POLICY_ADD, "plat", json!({"name": "plat", "layer": "PLATFORM", "source": TRIVIAL}));
    seed(&mut c, catalog::POLICY_ADD, "cons", json!({"name": "cons", "layer": "CONSTITUTION", "source": TRIVIAL}));
    c
}

fn snapshot(c: &Community) -> Json {
    serde_json::to_value(c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn constitution_changes_unwind_exactly(steps in proptest::collection::vec((0usize..14, 0usize..64), 1..8)) {
        let mut c = seeded();
        let mut seq = 1;
        let mut stack = Vec::new();
        let mut states = vec![snapshot(&c)];
        for (n, (kind, pick)) in steps.into_iter().enumerate() {
            let (t, p) = payload(&c, kind, pick, n);
            let id = ActionId(format!("a-{}", n + 1));
            let before = snapshot(&c);
            let mut ctx = ExecCtx { action: &id, now: at(Span::minutes(n as i64)), next_enact_seq: &mut seq };
            let mut out = ExecOutput::default();
            match catalog::execute(&mut c, t, p.as_object().unwrap(), &mut ctx, &mut out) {
                Ok(undo) => {
                    // A serialized round trip is what the engine stores.
                    let undo = catalog::undo_from_json(&catalog::undo_to_json(&undo)).unwrap();
                    stack.push((id, undo));
                    states.push(snapshot(&c));
                }
                Err(_) => prop_assert_eq!(&snapshot(&c), &before, "failed {} must not change anything", t),
            }
        }
        states.pop();
        while let Some((id, undo)) = stack.pop() {
            let mut out = ExecOutput::default();
            catalog::revert(&mut c, &undo, &id, at(Span::days(1)), &mut out).unwrap();
            prop_assert_eq!(&snapshot(&c), &states.pop().unwrap());
        }
    }

    #[test]
    fn sandbox_actions_unwind_exactly(steps in proptest::collection::vec((0usize..9, 0usize..6, "[a-z]{1,6}"), 1..10)) {
        let c = community(3);
        let mut p: SandboxPlatform = sandbox(&c);
        let mut undo = Vec::new();
        let mut states = vec![p.state.clone()];
        for (n, (kind, pick, word)) in steps.into_iter().enumerate() {
            let chans: Vec<String> = p.state.channels.keys().cloned().collect();
            let ch = chans[pick % chans.len()].clone();
            let msgs: Vec<String> = p.state.channels[&ch].messages.iter().map(|m| m.id.clone()).collect();
            let msg = msgs.get(pick % msgs.len().max(1)).cloned().unwrap_or_else(|| "m-none".into());
            let user = format!("u{}", 1 + pick % 3);
            let (t, payload) = match kind {
                0 => ("post_message", json!({"channel": ch, "text": word})),
                1 => ("delete_message", json!({"channel": ch, "message": msg})),
                2 => ("rename_channel", json!({"old": ch, "new": word})),
                3 => ("set_topic", json!({"channel": ch, "topic": word})),
                4 => ("create_channel", json!({"name": word})),
                5 => ("join_channel", json!({"channel": ch})),
                6 => ("leave_channel", json!({"channel": ch})),
                7 => ("pin_message", json!({"channel": ch, "message": msg})),
                _ => ("set_role_flag", json!({"user": user, "flag": word, "value": pick % 2 == 0})),
            };
            let a = Action {
                id: ActionId(format!("a-{}", n + 1)),
                action_type: t.into(),
                layer: Layer::Platform,
                initiator: uid(&user),
                payload: obj(payload),
                proposal: Proposal::new(T0),
                data: DataStore::default(),
                datetime_trigger: None,
                origin: Origin::WebProposal,
                bundle: None,
                member_of: None,
                in_effect: false,
                undo: None,
            };
            let before = p.state.clone();
            match p.apply(&a) {
                Ok(u) => {
                    undo.push(u);
                    states.push(p.state.clone());
                }
                Err(_) => prop_assert_eq!(&p.state, &before),
            }
        }
        states.pop();
        while let Some(u) = undo.pop() {
            p.unapply(&u).unwrap();
            prop_assert_eq!(&p.state, &states.pop().unwrap());
        }
    }
}
