mod common;

use std::collections::BTreeMap;

use common::*;
use govkit_core::bootstrap::seed_change;
use govkit_core::engine::{Basis, BundleMember, BundleRequest, Command, Engine, EventKind, Fetcher, Reply, SubmitRequest};
use govkit_core::model::{BundleKind, ProposalStatus, VoteValue};
use govkit_core::time::Span;
use govkit_core::{ErrorCode, GovError};
use serde_json::{json, Value as Json};

fn policy(filter: &str, check: &str, notify: &str, pass: &str) -> String {
    format!(
        "def filter(action, policy) {{\n{filter}\n}}\ndef initialize(action, policy) {{}}\ndef check(action, policy) {{\n{check}\n}}\ndef notify(action, policy) {{\n{notify}\n}}\ndef pass(action, policy) {{\n{pass}\n}}\ndef fail(action, policy) {{\n action.revert()\n}}\n"
    )
}

fn status(e: &Engine, id: &str) -> ProposalStatus {
    e.state().action(&id.into()).unwrap().proposal.status
}

struct Scorer;

impl Fetcher for Scorer {
    fn fetch(&mut self, url: &str, query: &BTreeMap<String, String>) -> Result<Json, GovError> {
        assert!(url.starts_with("http://scorer.test/"));
        let bad = query.get("text").is_some_and(|t| t.contains("trash"));
        Ok(json!({"score": if bad { 0.9 } else { 0.1 }}))
    }
}

const SCORED: &str = "return action.action_type == \"post_message\"";
const SCORE_CHECK: &str = "r = http_fetch(\"http://scorer.test/score\", {\"text\": action.payload[\"text\"]})
    if r[\"score\"] > 0.5 { return FAILED }
    return PASSED";

#[test]
fn http_fetch_needs_an_allow_listed_prefix() {
    let mut c = community(2);
    add_policy(&mut c, "scored", "PLATFORM", &policy(SCORED, SCORE_CHECK, "", "action.execute()"));
    let mut e = engine(c.clone());
    e.set_fetcher(Box::new(Scorer));
    e.apply(at(Span::ZERO), post("u1", "x")).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Proposed, "denied fetch leaves check neutral");
    let ev = e.take_events();
    assert!(ev.iter().any(|x| x.kind == EventKind::PolicyFunctionError && x.payload["code"] == "CAPABILITY_DENIED"));

    c.config.http_allowlist = vec!["http://scorer.test/".into()];
    let mut e = engine(c);
    e.set_fetcher(Box::new(Scorer));
    e.apply(at(Span::ZERO), post("u1", "nice day")).unwrap();
    e.apply(at(Span::ZERO), post("u2", "you are trash")).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Passed);
    assert_eq!(status(&e, "a-2"), ProposalStatus::Failed);
    assert_eq!(visible_texts(&e), vec!["nice day"]);
    let log = e.take_events();
    assert_eq!(log.iter().filter(|x| x.kind == EventKind::ExternalResponse).count(), 2);
    assert_eq!(log[0].kind, EventKind::CommunityBootstrapped);

    // Replay answers from the log; there is no fetcher to call.
    let full = log;
    let (r, events) = replay(&full, govkit_core::platform::SandboxPlatform::default());
    assert_eq!(serde_json::to_value(&events).unwrap(), serde_json::to_value(&full).unwrap());
    assert_eq!(r.canonical_state(), e.canonical_state());
}

#[test]
fn policy_generated_action_runs_its_own_pipeline_or_executes_directly() {
    let mut c = community(3);
    let promote = policy(
        "return action.action_type == \"pin_message\"",
        "return PASSED",
        "",
        "propose_action(\"set_topic\", {\"channel\": \"general\", \"topic\": \"pinned!\"}).execute()\n propose_action(\"post_message\", {\"channel\": \"general\", \"text\": \"auto\"})",
    );
    add_policy(&mut c, "promote", "PLATFORM", &promote);
    let mut e = engine(c);
    e.apply(at(Span::ZERO), post("u1", "hello")).unwrap();
    let r = e.apply(at(Span::ZERO), submit("u2", "pin_message", json!({"channel": "general", "message": "m-a-1"}))).unwrap();
    let d: Vec<(String, Basis)> = r.decisions().iter().map(|d| (d.action.to_string(), d.basis)).collect();
    assert_eq!(
        d,
        vec![
            ("a-2".into(), Basis::Policy),
            ("a-3".into(), Basis::PolicyExecuted),
            ("a-4".into(), Basis::Ungoverned),
        ]
    );
    assert_eq!(e.platform().state()["channels"]["general"]["topic"], "pinned!");
    assert_eq!(visible_texts(&e), vec!["hello", "auto"]);
    let a4 = e.state().action(&"a-4".into()).unwrap();
    assert_eq!(a4.initiator.as_str(), "u2");
}

#[test]
fn combination_is_all_or_nothing() {
    let mut e = engine(community(2));
    let m = |t: &str, p: Json| BundleMember { action_type: t.into(), payload: obj(p) };
    let req = SubmitRequest {
        initiator: uid("u1"),
        action_type: "ActionBundle".into(),
        payload: Default::default(),
        datetime_trigger: None,
        bundle: Some(BundleRequest {
            kind: BundleKind::Combination,
            members: vec![
                m("set_topic", json!({"channel": "general", "topic": "new"})),
                m("pin_message", json!({"channel": "general", "message": "m-missing"})),
            ],
        }),
    };
    e.apply(at(Span::ZERO), Command::Submit(req)).unwrap();
    assert_eq!(e.platform().state()["channels"]["general"]["topic"], "", "first member rolled back");
    let ev = e.take_events();
    assert!(ev.iter().any(|x| x.kind == EventKind::ActionReverted && x.payload["reason"] == "combination rollback"));
    assert!(ev.iter().any(|x| x.kind == EventKind::ExecutionFailed && x.action.as_ref().is_some_and(|a| a.as_str() == "a-1")));
    assert_eq!(status(&e, "a-2"), ProposalStatus::Failed);
    assert_eq!(status(&e, "a-3"), ProposalStatus::Failed);
}

const STAGE_ONE: &str = r#"def filter(action, policy) {
    return action.is_bundle and action.data.get("round", 1) == 1
}
def initialize(action, policy) {}
def check(action, policy) {
    if len(proposal.voters()) >= 3 { return PASSED }
    return PROPOSED
}
def notify(action, policy) {
    notify_users(users, "Round one for {action}", "choice")
}
def pass(action, policy) {
    i = len(action.members)
    while i >= 1 {
        if len(proposal.get_choice_votes(i)) < policy.data.get("threshold") {
            action.remove(i)
        }
        i = i - 1
    }
    action.data.set("round", 2)
}
def fail(action, policy) {}
"#;

const STAGE_TWO: &str = r#"def filter(action, policy) {
    return action.data.get("round") == 2
}
def initialize(action, policy) {}
def check(action, policy) {
    if proposal.stage_elapsed() < days(1) { return PROPOSED }
    best = 1
    i = 1
    for m in action.members {
        if len(proposal.get_choice_votes(i)) > len(proposal.get_choice_votes(best)) { best = i }
        i = i + 1
    }
    action.data.set("winner", best)
    return PASSED
}
def notify(action, policy) {
    notify_users(users, "Final round for {action}", "choice")
}
def pass(action, policy) {
    action.members[action.data.get("winner") - 1].execute()
}
def fail(action, policy) {}
"#;

#[test]
fn staged_bundle_drops_weak_options_between_rounds() {
    let mut c = community(4);
    seed_change(
        &mut c,
        "PolicyBundleAdd",
        "caucus",
        json!({"name": "caucus", "layer": "PLATFORM", "stages": [
            {"name": "round-one", "source": STAGE_ONE, "data": {"threshold": 1}},
            {"name": "round-two", "source": STAGE_TWO},
        ]}),
        T0,
    )
    .unwrap();
    let mut e = engine(c);
    let topic = |t: &str| BundleMember { action_type: "set_topic".into(), payload: obj(json!({"channel": "general", "topic": t})) };
    let req = SubmitRequest {
        initiator: uid("u1"),
        action_type: "ActionBundle".into(),
        payload: Default::default(),
        datetime_trigger: None,
        bundle: Some(BundleRequest { kind: BundleKind::Election, members: vec![topic("a"), topic("b"), topic("c")] }),
    };
    e.apply(at(Span::ZERO), Command::Submit(req)).unwrap();
    let choice = |u: &str, n| Command::Vote { voter: uid(u), action: "a-1".into(), value: VoteValue::Choice(n) };
    e.apply(at(Span::ZERO), choice("u1", 1)).unwrap();
    e.apply(at(Span::ZERO), choice("u2", 3)).unwrap();
    e.apply(at(Span::ZERO), choice("u3", 3)).unwrap();
    // Option b got no votes and is gone; c is now option 2.
    assert_eq!(status(&e, "a-3"), ProposalStatus::Failed);
    let b = e.state().action(&"a-1".into()).unwrap().bundle.clone().unwrap();
    assert_eq!(b.members.iter().map(|m| m.as_str()).collect::<Vec<_>>(), ["a-2", "a-4"]);
    assert_eq!(e.state().tally(&"a-1".into()).unwrap().choices, vec![1, 2]);
    let pinned: Vec<_> = e.take_events().into_iter().filter(|x| x.kind == EventKind::GoverningPolicyPinned).collect();
    assert_eq!(pinned.len(), 2);
    assert_eq!(pinned[1].payload["stage"], 1);

    e.apply(at(Span::hours(12)), choice("u4", 2)).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Proposed);
    e.apply(at(Span::days(1)), Command::Tick).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Passed);
    assert_eq!(e.platform().state()["channels"]["general"]["topic"], "c");
    assert_eq!(status(&e, "a-2"), ProposalStatus::Failed);
    assert_eq!(status(&e, "a-4"), ProposalStatus::Passed);
}

#[test]
fn scheduled_actions_wait_for_their_trigger() {
    let mut e = engine(community(2));
    let req = SubmitRequest {
        initiator: uid("u1"),
        action_type: "set_topic".into(),
        payload: obj(json!({"channel": "general", "topic": "later"})),
        datetime_trigger: Some(at(Span::hours(3))),
        bundle: None,
    };
    e.apply(at(Span::ZERO), Command::Submit(req)).unwrap();
    e.apply(at(Span::hours(2)), Command::Tick).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Proposed);
    let r = e.apply(at(Span::hours(3)), Command::Tick).unwrap();
    assert_eq!(r.decisions().len(), 1);
    assert_eq!(e.platform().state()["channels"]["general"]["topic"], "later");
}

#[test]
fn missing_propose_permission_is_denied() {
    let mut c = community(2);
    let base = c.base_role.clone();
    c.roles.get_mut(&base).unwrap().permissions.retain(|p| p.action_type != "rename_channel");
    let mut e = engine(c);
    let r = e.apply(at(Span::ZERO), submit("u1", "rename_channel", json!({"old": "general", "new": "lobby"}))).unwrap();
    assert_eq!(r.decisions()[0].basis, Basis::Denied);
    assert!(e.platform().state()["channels"]["general"].is_object());
}

#[test]
fn duplicate_platform_event_is_ignored_without_trace() {
    let mut e = engine(community(2));
    let ev = |id: &str| Command::PlatformEvent {
        event_id: Some(id.into()),
        actor_handle: "@u1".into(),
        action_type: "post_message".into(),
        payload: obj(json!({"channel": "general", "text": "once"})),
    };
    e.apply(at(Span::ZERO), ev("evt-1")).unwrap();
    e.take_events();
    assert!(matches!(e.apply(at(Span::ZERO), ev("evt-1")).unwrap(), Reply::Ignored { .. }));
    assert!(e.take_events().is_empty());
    assert_eq!(visible_texts(&e), vec!["once"]);
    let r = e
        .apply(at(Span::ZERO), Command::PlatformEvent {
            event_id: None,
            actor_handle: "@stranger".into(),
            action_type: "post_message".into(),
            payload: obj(json!({"channel": "general", "text": "spam"})),
        })
        .unwrap();
    assert!(matches!(r, Reply::Ignored { .. }));
    assert_eq!(kinds(&e.take_events()), vec![EventKind::CommandAccepted, EventKind::EventDropped]);
}

#[test]
fn editing_a_policy_changes_how_its_pending_actions_are_judged() {
    let mut c = community(3);
    let hold = policy(SCORED, "return PROPOSED", "", "action.execute()");
    add_policy(&mut c, "hold", "PLATFORM", &hold);
    let mut e = engine(c);
    e.apply(at(Span::ZERO), post("u1", "waiting")).unwrap();
    let edit = submit("u1", "PolicyEdit", json!({"policy": "p-hold", "source": policy(SCORED, "return PASSED", "", "action.execute()")}));
    let Reply::Submitted { action, .. } = e.apply(at(Span::ZERO), edit).unwrap() else { panic!() };
    e.apply(at(Span::ZERO), yes("u1", action.as_str())).unwrap();
    e.apply(at(Span::ZERO), yes("u2", action.as_str())).unwrap();
    assert_eq!(status(&e, action.as_str()), ProposalStatus::Passed);
    e.apply(at(Span::minutes(1)), Command::Tick).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Passed);
    assert_eq!(visible_texts(&e), vec!["waiting"]);
}

#[test]
fn removed_policy_keeps_judging_what_it_already_governs() {
    let mut c = community(3);
    let slow = policy(SCORED, "if proposal.elapsed() >= hours(1) { return PASSED }\n return PROPOSED", "", "action.execute()");
    add_policy(&mut c, "slow", "PLATFORM", &slow);
    let mut e = engine(c);
    e.apply(at(Span::ZERO), post("u1", "later")).unwrap();
    let Reply::Submitted { action, .. } =
        e.apply(at(Span::ZERO), submit("u1", "PolicyRemove", json!({"policy": "p-slow"}))).unwrap()
    else {
        panic!()
    };
    e.apply(at(Span::ZERO), yes("u1", action.as_str())).unwrap();
    e.apply(at(Span::ZERO), yes("u2", action.as_str())).unwrap();
    assert!(e.community().policy(&"p-slow".into()).is_none());
    e.apply(at(Span::hours(1)), Command::Tick).unwrap();
    assert_eq!(status(&e, "a-1"), ProposalStatus::Passed);
    // New actions are no longer governed by it.
    let r = e.apply(at(Span::hours(1)), post("u2", "now")).unwrap();
    assert_eq!(r.decisions()[0].basis, Basis::Ungoverned);
}

#[test]
fn reverting_a_role_that_policies_depend_on_fails_loudly() {
    let mut c = community(1);
    let mut e = {
        c.config.default_disposition = govkit_core::model::DefaultDisposition::Allow;
        engine(c)
    };
    let role = e.apply(at(Span::ZERO), submit("u1", "RoleAdd", json!({"name": "Jury"}))).unwrap();
    let Reply::Submitted { action: role_action, .. } = role else { panic!() };
    e.apply(at(Span::ZERO), yes("u1", role_action.as_str())).unwrap();
    let uses = policy("return len(users.filter(role=\"Jury\")) > 0", "return PASSED", "", "action.execute()");
    let Reply::Submitted { action: p, .. } = e
        .apply(at(Span::ZERO), submit("u1", "PolicyAdd", json!({"name": "jury-only", "layer": "PLATFORM", "source": uses})))
        .unwrap()
    else {
        panic!()
    };
    e.apply(at(Span::ZERO), yes("u1", p.as_str())).unwrap();
    assert!(e.community().policy_by_name("jury-only").is_some());
    e.take_events();
    let undo = e.state().action(&role_action).unwrap().undo.clone().unwrap();
    let undo = govkit_core::catalog::undo_from_json(&undo).unwrap();
    let mut c = e.community().clone();
    let mut out = Default::default();
    let res = govkit_core::catalog::revert(&mut c, &undo, &role_action, at(Span::hours(1)), &mut out);
    assert_eq!(res.unwrap_err().code, ErrorCode::DependentState);
    assert_eq!(serde_json::to_value(&c).unwrap(), serde_json::to_value(e.community()).unwrap());
}
