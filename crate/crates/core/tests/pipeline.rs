mod common;

use common::*;
use govkit_core::engine::{Basis, BundleMember, BundleRequest, Command, EventKind, Reply, SubmitRequest};
use govkit_core::model::{BundleKind, DefaultDisposition, ProposalStatus, VoteValue};
use govkit_core::time::Span;
use govkit_core::ErrorCode;
use serde_json::json;

const JURY: &str = r#"# description: Three random members judge each message within two days.
def filter(action, policy) {
    return action.action_type == "post_message"
}
def initialize(action, policy) {
    action.data.set("jury", random_sample(users.all(), 3))
}
def check(action, policy) {
    jury = action.data.get("jury")
    if len(proposal.get_yes_votes(users=jury)) >= 2 {
        return PASSED
    }
    if len(proposal.get_no_votes(users=jury)) >= 2 or proposal.elapsed() >= days(2) {
        return FAILED
    }
    return PROPOSED
}
def notify(action, policy) {
    notify_users(action.data.get("jury"), "Jury duty: {action}", "boolean")
}
def pass(action, policy) {
    action.execute()
}
def fail(action, policy) {}
"#;

fn jury_engine() -> govkit_core::engine::Engine {
    let mut c = community(5);
    add_policy(&mut c, "jury", "PLATFORM", JURY);
    engine(c)
}

fn jurors(e: &govkit_core::engine::Engine, action: &str) -> Vec<String> {
    let a = e.state().action(&action.into()).unwrap();
    a.data.get("jury").unwrap().as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
}

#[test]
fn ungoverned_platform_action_executes_under_default_allow() {
    let mut e = engine(community(3));
    let r = e.apply(at(Span::ZERO), post("u1", "hello")).unwrap();
    let Reply::Submitted { status, decisions, .. } = r else { panic!() };
    assert_eq!(status, ProposalStatus::Passed);
    assert_eq!(decisions[0].basis, Basis::Ungoverned);
    assert_eq!(visible_texts(&e), vec!["hello"]);
}

#[test]
fn default_deny_reverts_the_members_attempt() {
    let mut c = community(3);
    c.config.default_disposition = DefaultDisposition::Deny;
    let mut e = engine(c);
    let r = e.apply(at(Span::ZERO), post("u1", "hello")).unwrap();
    assert_eq!(r.decisions()[0].status, ProposalStatus::Failed);
    assert!(visible_texts(&e).is_empty());
}

#[test]
fn jury_intercepts_then_executes_on_two_yes_votes() {
    let mut e = jury_engine();
    e.apply(at(Span::ZERO), post("u2", "hi all")).unwrap();
    assert!(visible_texts(&e).is_empty(), "held while the jury deliberates");
    let jury = jurors(&e, "a-1");
    assert_eq!(jury.len(), 3);
    let ev = e.take_events();
    let notified = ev.iter().find(|x| x.kind == EventKind::NotificationDelivered).unwrap();
    assert_eq!(notified.payload["recipients"], json!(jury));

    e.apply(at(Span::hours(1)), yes(&jury[0], "a-1")).unwrap();
    let r = e.apply(at(Span::hours(2)), yes(&jury[1], "a-1")).unwrap();
    assert_eq!(r.decisions()[0].status, ProposalStatus::Passed);
    assert_eq!(visible_texts(&e), vec!["hi all"]);
}

#[test]
fn votes_from_outside_the_jury_do_not_count() {
    let mut e = jury_engine();
    e.apply(at(Span::ZERO), post("u2", "x")).unwrap();
    let jury = jurors(&e, "a-1");
    for u in ["u1", "u2", "u3", "u4", "u5"].iter().filter(|u| !jury.contains(&u.to_string())) {
        e.apply(at(Span::ZERO), yes(u, "a-1")).unwrap();
    }
    assert_eq!(e.state().action(&"a-1".into()).unwrap().proposal.status, ProposalStatus::Proposed);
}

#[test]
fn expiry_is_observed_on_tick() {
    let mut e = jury_engine();
    e.apply(at(Span::ZERO), post("u2", "x")).unwrap();
    let r = e.apply(at(Span::days(2)), Command::Tick).unwrap();
    assert_eq!(r.decisions()[0].status, ProposalStatus::Failed);
    assert!(visible_texts(&e).is_empty());
}

#[test]
fn stale_vote_is_rejected_and_audited() {
    let mut e = jury_engine();
    e.apply(at(Span::ZERO), post("u2", "x")).unwrap();
    e.apply(at(Span::days(3)), Command::Tick).unwrap();
    e.take_events();
    let err = e.apply(at(Span::days(3)), yes("u1", "a-1")).unwrap_err();
    assert_eq!(err.code, ErrorCode::StaleVote);
    let ev = e.take_events();
    assert_eq!(kinds(&ev), vec![EventKind::CommandAccepted, EventKind::VoteRejected]);
}

#[test]
fn prechecked_rejections_leave_no_events() {
    let mut e = engine(community(2));
    e.take_events();
    let err = e.apply(at(Span::ZERO), submit("mallory", "post_message", json!({}))).unwrap_err();
    assert_eq!(err.code, ErrorCode::Forbidden);
    let err = e.apply(at(Span::ZERO), submit("u1", "teleport", json!({}))).unwrap_err();
    assert_eq!(err.code, ErrorCode::UnknownActionType);
    let err = e.apply(at(Span::ZERO), submit("u1", "post_message", json!({"channel": 3}))).unwrap_err();
    assert_eq!(err.code, ErrorCode::SchemaViolation);
    assert!(!err.field_errors.is_empty());
    assert!(e.take_events().is_empty());
}

#[test]
fn clock_never_moves_backwards() {
    let mut e = engine(community(2));
    e.apply(at(Span::hours(1)), Command::Tick).unwrap();
    let err = e.apply(at(Span::ZERO), Command::Tick).unwrap_err();
    assert_eq!(err.code, ErrorCode::ClockRegression);
}

#[test]
fn starter_policy_needs_a_strict_majority_of_members() {
    let mut e = engine(community(4));
    let edit = submit("u1", "DocumentEdit", json!({"document": "d-charter", "body": "Be kind."}));
    let r = e.apply(at(Span::ZERO), edit).unwrap();
    let Reply::Submitted { action, status, .. } = r else { panic!() };
    assert_eq!(status, ProposalStatus::Proposed);
    e.apply(at(Span::ZERO), yes("u1", action.as_str())).unwrap();
    e.apply(at(Span::ZERO), yes("u2", action.as_str())).unwrap();
    assert_eq!(e.community().document(&"d-charter".into()).unwrap().body, "");
    let r = e.apply(at(Span::ZERO), yes("u3", action.as_str())).unwrap();
    assert_eq!(r.decisions()[0].status, ProposalStatus::Passed);
    let doc = e.community().document(&"d-charter".into()).unwrap();
    assert_eq!((doc.body.as_str(), doc.version), ("Be kind.", 2));
}

#[test]
fn execute_permission_bypasses_governance() {
    let mut c = community(3);
    govkit_core::bootstrap::seed_change(
        &mut c,
        "RoleAdd",
        "mods",
        json!({"name": "Moderator", "permissions": [{"action_type": "post_message", "kind": "EXECUTE"}]}),
        T0,
    )
    .unwrap();
    govkit_core::bootstrap::seed_change(&mut c, "RoleAddMember", "m1", json!({"role": "Moderator", "user": "u3"}), T0)
        .unwrap();
    add_policy(&mut c, "jury", "PLATFORM", JURY);
    let mut e = engine(c);
    let r = e.apply(at(Span::ZERO), post("u3", "announcement")).unwrap();
    assert_eq!(r.decisions()[0].basis, Basis::Bypass);
    assert_eq!(visible_texts(&e), vec!["announcement"]);
}

#[test]
fn filter_errors_are_audited_and_fall_through() {
    let mut c = community(2);
    let broken = JURY.replace("return action.action_type == \"post_message\"", "return 1 / 0");
    add_policy(&mut c, "broken", "PLATFORM", &broken);
    let mut e = engine(c);
    let r = e.apply(at(Span::ZERO), post("u1", "x")).unwrap();
    assert_eq!(r.decisions()[0].basis, Basis::Ungoverned);
    let ev = e.take_events();
    let err = ev.iter().find(|x| x.kind == EventKind::PolicyFunctionError).unwrap();
    assert_eq!(err.payload["function"], "filter");
    assert_eq!(err.payload["code"], "RUNTIME_ERROR");
}

#[test]
fn runaway_check_leaves_the_action_pending() {
    let mut c = community(2);
    let spin = JURY.replace("    jury = action.data.get(\"jury\")\n", "    while true { }\n    jury = []\n");
    add_policy(&mut c, "spin", "PLATFORM", &spin);
    let mut e = engine(c);
    let r = e.apply(at(Span::ZERO), post("u1", "x")).unwrap();
    let Reply::Submitted { status, .. } = r else { panic!() };
    assert_eq!(status, ProposalStatus::Proposed);
    let ev = e.take_events();
    assert!(ev
        .iter()
        .any(|x| x.kind == EventKind::PolicyFunctionError && x.payload["code"] == "BUDGET_EXCEEDED"));
}

#[test]
fn trial_policy_records_without_touching_the_platform() {
    let mut c = community(3);
    let trial = JURY
        .replace("def pass(action, policy) {\n    action.execute()\n}", "def pass(action, policy) {}");
    add_policy(&mut c, "jury-trial", "PLATFORM", &trial);
    assert!(c.policy_by_name("jury-trial").unwrap().trial_mode);
    let mut e = engine(c);
    e.apply(at(Span::ZERO), post("u1", "x")).unwrap();
    assert_eq!(visible_texts(&e), vec!["x"], "trial never intercepts");
    let gov = e.platform().state()["governance_messages"].as_array().unwrap().len();
    assert_eq!(gov, 0, "trial never notifies");
    let jury = jurors(&e, "a-1");
    e.apply(at(Span::ZERO), no(&jury[0], "a-1")).unwrap();
    let r = e.apply(at(Span::ZERO), no(&jury[1], "a-1")).unwrap();
    let d = &r.decisions()[0];
    assert!(d.trial);
    assert_eq!(d.status, ProposalStatus::Failed);
    assert_eq!(visible_texts(&e), vec!["x"]);
}

#[test]
fn signal_on_a_governance_message_becomes_a_vote() {
    let mut e = jury_engine();
    e.apply(at(Span::ZERO), post("u2", "x")).unwrap();
    let jury = jurors(&e, "a-1");
    let msg = e.state().listeners.keys().next().unwrap().clone();
    let sig = |u: &str, s: &str| Command::Signal { message: msg.clone(), handle: format!("@{u}"), signal: s.into() };
    let r = e.apply(at(Span::ZERO), sig(&jury[0], "👍")).unwrap();
    assert!(matches!(r, Reply::Voted { .. }));
    let r = e.apply(at(Span::ZERO), sig(&jury[1], "party parrot")).unwrap();
    assert!(matches!(r, Reply::Ignored { .. }));
    e.apply(at(Span::ZERO), sig(&jury[1], "+1")).unwrap();
    assert_eq!(visible_texts(&e), vec!["x"]);
    let err = e.apply(at(Span::ZERO), sig(&jury[2], "yes")).unwrap_err();
    assert_eq!(err.code, ErrorCode::StaleVote);
}

const PLURALITY: &str = r#"def filter(action, policy) {
    return action.is_bundle
}
def initialize(action, policy) {}
def check(action, policy) {
    if proposal.elapsed() < days(5) {
        return PROPOSED
    }
    if len(proposal.voters()) < (len(users) * 25 + 99) / 100 {
        return FAILED
    }
    return PASSED
}
def notify(action, policy) {
    notify_users(users, "Election {action}", "choice")
}
def pass(action, policy) {
    best = 1
    best_n = -1
    i = 1
    for m in action.members {
        n = len(proposal.get_choice_votes(i))
        if n > best_n {
            best = i
            best_n = n
        }
        i = i + 1
    }
    action.members[best - 1].execute()
}
def fail(action, policy) {}
"#;

#[test]
fn election_executes_the_plurality_winner_only() {
    let mut c = community(4);
    add_policy(&mut c, "plurality", "PLATFORM", PLURALITY);
    let mut e = engine(c);
    let topic = |t: &str| BundleMember { action_type: "set_topic".into(), payload: obj(json!({"channel": "general", "topic": t})) };
    let req = SubmitRequest {
        initiator: uid("u1"),
        action_type: "ActionBundle".into(),
        payload: Default::default(),
        datetime_trigger: None,
        bundle: Some(BundleRequest { kind: BundleKind::Election, members: vec![topic("red"), topic("blue")] }),
    };
    e.apply(at(Span::ZERO), Command::Submit(req)).unwrap();
    let choice = |u: &str, n| Command::Vote { voter: uid(u), action: "a-1".into(), value: VoteValue::Choice(n) };
    e.apply(at(Span::ZERO), choice("u1", 2)).unwrap();
    e.apply(at(Span::ZERO), choice("u2", 2)).unwrap();
    e.apply(at(Span::ZERO), choice("u3", 1)).unwrap();
    assert_eq!(e.apply(at(Span::ZERO), choice("u4", 3)).unwrap_err().code, ErrorCode::InvalidInput);
    assert_eq!(e.apply(at(Span::ZERO), yes("u4", "a-2")).unwrap_err().code, ErrorCode::InvalidInput);
    e.apply(at(Span::days(5)), Command::Tick).unwrap();
    assert_eq!(e.platform().state()["channels"]["general"]["topic"], "blue");
    let st = |id: &str| e.state().action(&id.into()).unwrap().proposal.status;
    assert_eq!((st("a-1"), st("a-2"), st("a-3")), (ProposalStatus::Passed, ProposalStatus::Failed, ProposalStatus::Passed));
}

#[test]
fn replay_regenerates_events_and_state() {
    let mut e = jury_engine();
    let jury_src = e.platform().state();
    let mut log = e.take_events();
    e.apply(at(Span::ZERO), post("u2", "x")).unwrap();
    let jury = jurors(&e, "a-1");
    e.apply(at(Span::hours(1)), yes(&jury[0], "a-1")).unwrap();
    let _ = e.apply(at(Span::hours(1)), yes("ghost", "a-1"));
    e.apply(at(Span::hours(2)), post("u3", "y")).unwrap();
    e.apply(at(Span::days(3)), Command::Tick).unwrap();
    log.extend(e.take_events());
    let _ = jury_src;

    let (r, regenerated) = replay(&log, govkit_core::platform::SandboxPlatform::default());
    assert_eq!(serde_json::to_value(&regenerated).unwrap(), serde_json::to_value(&log).unwrap());
    assert_eq!(r.canonical_state(), e.canonical_state());
}
