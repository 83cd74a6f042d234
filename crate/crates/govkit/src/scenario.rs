//! Scripted, headless runs of a community on the sandbox platform.
//!
//! A script seeds a community (members, roles, channels, policies), then
//! drives it through a timeline of steps under a simulated clock. After
//! the last step the runner checks that every decided action has exactly
//! one disposition record and that replaying `events.jsonl` reproduces the
//! live state byte for byte. Same script, same report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use govkit_core::bootstrap::{bootstrap_community, seed_change};
use govkit_core::engine::{
    Basis, BundleMember, BundleRequest, Command, EngineEvent, EventKind, Reply, SubmitRequest,
};
use govkit_core::ids::{ActionId, MessageRef, PolicyId, RoleId, UserId};
use govkit_core::model::{Action, BundleKind, DataStore, ProposalStatus, User, VoteValue};
use govkit_core::platform::{sandbox_descriptor, Channel, SandboxPlatform, SandboxState};
use govkit_core::time::{Span, Timestamp};
use govkit_core::{ErrorCode, GovError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::fetch::HttpFetcher;
use crate::node::Node;
use crate::scorer::MockScorer;
use crate::store;

/// URL prefix scenario policies use for the bundled scorer; rewritten to
/// the scorer's actual address at run time.
pub const MOCK_SCORER_PREFIX: &str = "http://mock-scorer.local/";

const DEFAULT_START: &str = "2024-01-01T00:00:00Z";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start: Option<String>,
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub roles: Vec<RoleSpec>,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub config: Map<String, Json>,
    #[serde(default)]
    pub services: Vec<String>,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub policy_bundles: Vec<PolicyBundleSpec>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub id: String,
    #[serde(default)]
    pub handle: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub attributes: Map<String, Json>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSpec {
    pub name: String,
    #[serde(default)]
    pub members: Vec<String>,
    /// `{action_type, kind}` objects, as in a RoleAdd payload.
    #[serde(default)]
    pub permissions: Vec<Json>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    #[serde(default)]
    pub topic: String,
    /// Member ids; every member when absent.
    #[serde(default)]
    pub members: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub file: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "platform_layer")]
    pub layer: String,
    #[serde(default)]
    pub precedence: Option<i64>,
    #[serde(default)]
    pub data: Option<Map<String, Json>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBundleSpec {
    pub name: String,
    #[serde(default = "platform_layer")]
    pub layer: String,
    #[serde(default)]
    pub precedence: Option<i64>,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub file: String,
    pub name: String,
    #[serde(default)]
    pub data: Option<Map<String, Json>>,
}

fn platform_layer() -> String {
    "PLATFORM".into()
}

/// One timeline entry: exactly one operation plus an optional expected error.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default)]
    pub platform_event: Option<PlatformEventStep>,
    #[serde(default)]
    pub propose: Option<ProposeStep>,
    #[serde(default)]
    pub vote: Option<VoteStep>,
    #[serde(default)]
    pub signal: Option<SignalStep>,
    /// Moves the clock forward ("2d", "5h", "30m") and ticks.
    #[serde(default)]
    pub advance: Option<String>,
    #[serde(default)]
    pub tick: Option<Json>,
    #[serde(default)]
    pub expect: Option<Expect>,
    /// Error code the operation must fail with.
    #[serde(default)]
    pub expect_error: Option<ErrorCode>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformEventStep {
    pub user: String,
    #[serde(rename = "type")]
    pub action_type: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
    #[serde(default)]
    pub event_id: Option<String>,
    #[serde(default, rename = "as")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeStep {
    pub user: String,
    #[serde(rename = "type", default = "bundle_type")]
    pub action_type: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
    /// `+2d` relative to the current clock, or an RFC 3339 instant.
    #[serde(default)]
    pub trigger: Option<String>,
    #[serde(default)]
    pub bundle: Option<BundleSpecStep>,
    #[serde(default, rename = "as")]
    pub label: Option<String>,
}

fn bundle_type() -> String {
    govkit_core::model::BUNDLE_ACTION_TYPE.into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpecStep {
    pub kind: BundleKind,
    pub members: Vec<BundleMemberStep>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMemberStep {
    #[serde(rename = "type")]
    pub action_type: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteStep {
    pub user: String,
    pub action: String,
    /// `yes`, `no`, or a 1-based option number.
    pub value: Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalStep {
    pub user: String,
    /// The action whose newest governance message receives the signal.
    pub action: String,
    pub signal: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub status: Option<ProposalStatus>,
    #[serde(default)]
    pub basis: Option<Basis>,
    /// Policy that governs (or decided) the action.
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub in_effect: Option<bool>,
    /// `now` or an RFC 3339 instant.
    #[serde(default)]
    pub decided_at: Option<String>,
    #[serde(default)]
    pub tally: Option<TallyCheck>,
    /// Checked against the action's data store.
    #[serde(default)]
    pub data: Option<PathCheck>,
    #[serde(default)]
    pub platform: Option<PathCheck>,
    #[serde(default)]
    pub policy_data: Option<PolicyDataCheck>,
    #[serde(default)]
    pub role: Option<RoleCheck>,
    #[serde(default)]
    pub events: Option<EventCheck>,
}

/// Dotted path into a JSON document; numeric segments index arrays.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathCheck {
    pub path: String,
    #[serde(default)]
    pub equals: Option<Json>,
    #[serde(default)]
    pub exists: Option<bool>,
    #[serde(default)]
    pub len: Option<usize>,
    /// The value is an array without repeated elements.
    #[serde(default)]
    pub distinct: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PolicyDataCheck {
    pub policy: String,
    #[serde(flatten)]
    pub check: PathCheck,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleCheck {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TallyCheck {
    #[serde(default)]
    pub yes: Option<u32>,
    #[serde(default)]
    pub no: Option<u32>,
    #[serde(default)]
    pub choices: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventCheck {
    pub kind: EventKind,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub policy: Option<String>,
    /// Key/value pairs every counted event's payload must contain.
    #[serde(default)]
    pub payload: Map<String, Json>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub at_least: Option<usize>,
}

/// A parsed script together with the policy sources it references.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub script: ScenarioScript,
    pub sources: BTreeMap<String, String>,
    pub path: PathBuf,
}

fn invalid(msg: impl Into<String>) -> GovError {
    GovError::new(ErrorCode::InvalidInput, msg)
}

/// Reads and validates a script. Every referenced policy file is read and
/// parsed here, so load problems surface before anything runs.
pub fn load(path: &Path) -> Result<Loaded, GovError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let script: ScenarioScript =
        serde_yaml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut sources = BTreeMap::new();
    let files = script
        .policies
        .iter()
        .map(|p| &p.file)
        .chain(script.policy_bundles.iter().flat_map(|b| b.stages.iter().map(|s| &s.file)));
    for f in files {
        let p = base.join(f);
        let src = std::fs::read_to_string(&p).map_err(|e| invalid(format!("policy file {}: {e}", p.display())))?;
        govkit_core::dsl::parse_policy_source(&src).map_err(|e| {
            let e = GovError::from(e);
            GovError::new(e.code, format!("policy file {}: {}", p.display(), e.message))
        })?;
        sources.insert(f.clone(), src);
    }
    for (i, s) in script.steps.iter().enumerate() {
        let ops = [
            s.platform_event.is_some(),
            s.propose.is_some(),
            s.vote.is_some(),
            s.signal.is_some(),
            s.advance.is_some(),
            s.tick.is_some(),
            s.expect.is_some(),
        ];
        if ops.iter().filter(|b| **b).count() != 1 {
            return Err(invalid(format!("step {i}: exactly one operation per step")));
        }
        if let Some(a) = &s.advance {
            Span::parse(a).map_err(|e| invalid(format!("step {i}: {e}")))?;
        }
    }
    for svc in &script.services {
        if svc != "mock_scorer" {
            return Err(invalid(format!("unknown service `{svc}`")));
        }
    }
    Ok(Loaded { script, sources, path: path.to_path_buf() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub op: String,
    pub at: Timestamp,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<Json>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionSummary {
    pub id: ActionId,
    pub action_type: String,
    pub status: ProposalStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyId>,
    pub in_effect: bool,
}

/// Outcome of a run. Serializes to the documented JSON report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Counts,
    pub steps: Vec<StepReport>,
    pub completeness: CheckOutcome,
    pub replay: CheckOutcome,
    pub final_clock: Timestamp,
    pub actions: Vec<ActionSummary>,
    pub platform: Json,
    pub audit_log: Vec<EngineEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub passed: usize,
    pub failed: usize,
}

impl Report {
    pub fn failed_steps(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(|s| !s.ok)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} (seed {})", self.scenario, self.seed);
        for s in &self.steps {
            let mark = if s.ok { "ok  " } else { "FAIL" };
            let _ = write!(out, "  [{mark}] step {:>3} {} @ {}", s.index, s.op, s.at);
            if let Some(d) = &s.detail {
                let _ = write!(out, ": {d}");
            }
            out.push('\n');
            if let (false, Some(o)) = (s.ok, &s.observed) {
                let _ = writeln!(out, "         observed: {o}");
            }
        }
        let _ = writeln!(out, "  completeness: {} ({})", verdict(self.completeness.ok), self.completeness.detail);
        let _ = writeln!(out, "  replay:       {} ({})", verdict(self.replay.ok), self.replay.detail);
        let _ = writeln!(
            out,
            "{}: {} assertions passed, {} failed, {} actions, {} audit records",
            verdict(self.passed),
            self.assertions.passed,
            self.assertions.failed,
            self.actions.len(),
            self.audit_log.len()
        );
        out
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where the community log is written; a temporary directory otherwise.
    pub out_dir: Option<PathBuf>,
}

/// Seeds the community and its sandbox from the script.
pub fn build_community(
    loaded: &Loaded,
) -> Result<(govkit_core::model::Community, SandboxPlatform, Timestamp), GovError> {
    let s = &loaded.script;
    let start = Timestamp::parse(s.start.as_deref().unwrap_or(DEFAULT_START)).map_err(invalid)?;
    let users: Vec<User> = s
        .members
        .iter()
        .map(|m| {
            let mut u = User::new(m.id.clone());
            if let Some(h) = &m.handle {
                u.platform_handle = h.clone();
            }
            if let Some(d) = &m.display_name {
                u.display_name = d.clone();
            }
            u.attributes = DataStore::from_json_object(m.attributes.clone())?;
            Ok(u)
        })
        .collect::<Result<_, GovError>>()?;
    let mut c = bootstrap_community(&s.name, users, s.seed, &sandbox_descriptor(), start)?;

    let seed = |c: &mut govkit_core::model::Community, t: &str, label: &str, payload: Json| {
        seed_change(c, t, label, payload, start).map_err(|e| {
            let fields: Vec<String> = e.field_errors.iter().map(|f| format!("{}: {}", f.field, f.message)).collect();
            invalid(format!("seeding {t} `{label}`: {} {}", e.message, fields.join("; ")))
        })
    };
    for r in &s.roles {
        seed(&mut c, "RoleAdd", &r.name, json!({"name": r.name, "permissions": r.permissions}))?;
        for m in &r.members {
            seed(&mut c, "RoleAddMember", &r.name, json!({"role": r.name, "user": m}))?;
        }
    }
    if !s.config.is_empty() {
        seed(&mut c, "CommunityConfigEdit", "config", Json::Object(s.config.clone()))?;
    }
    for p in &s.policies {
        let name = p.name.clone().unwrap_or_else(|| file_stem(&p.file));
        let mut payload = json!({"name": name, "layer": p.layer, "source": loaded.sources[&p.file]});
        if let Some(pr) = p.precedence {
            payload["precedence"] = json!(pr);
        }
        if let Some(d) = &p.data {
            payload["data"] = Json::Object(d.clone());
        }
        seed(&mut c, "PolicyAdd", &name, payload)?;
    }
    for b in &s.policy_bundles {
        let stages: Vec<Json> = b
            .stages
            .iter()
            .map(|st| {
                let mut v = json!({"name": st.name, "source": loaded.sources[&st.file]});
                if let Some(d) = &st.data {
                    v["data"] = Json::Object(d.clone());
                }
                v
            })
            .collect();
        let mut payload = json!({"name": b.name, "layer": b.layer, "stages": stages});
        if let Some(pr) = b.precedence {
            payload["precedence"] = json!(pr);
        }
        seed(&mut c, "PolicyBundleAdd", &b.name, payload)?;
    }

    let handle = |id: &str| c.users.get(&UserId::from(id)).map(|u| u.platform_handle.clone());
    let mut st = SandboxState::default();
    let channels = if s.channels.is_empty() {
        vec![ChannelSpec { name: "general".into(), topic: String::new(), members: None }]
    } else {
        s.channels.clone()
    };
    for ch in channels {
        let members = match &ch.members {
            None => c.users.values().map(|u| u.platform_handle.clone()).collect(),
            Some(ids) => ids
                .iter()
                .map(|i| handle(i).ok_or_else(|| invalid(format!("channel #{}: unknown member `{i}`", ch.name))))
                .collect::<Result<_, _>>()?,
        };
        st.channels.insert(ch.name.clone(), Channel { topic: ch.topic.clone(), members, ..Channel::default() });
    }
    st.handles = c.users.iter().map(|(k, u)| (k.clone(), u.platform_handle.clone())).collect();
    Ok((c, SandboxPlatform::new(st), start))
}

fn file_stem(f: &str) -> String {
    Path::new(f).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| f.to_string())
}

/// Runs a loaded script to completion. Failed expectations are reported,
/// not raised; `Err` means the run could not be set up.
pub fn run(loaded: &Loaded, opts: &RunOptions) -> Result<Report, GovError> {
    let (community, platform, start) = build_community(loaded)?;
    let scorer = if loaded.script.services.iter().any(|s| s == "mock_scorer") {
        Some(MockScorer::start().map_err(|e| invalid(format!("mock scorer: {e}")))?)
    } else {
        None
    };
    let tmp;
    let dir = match &opts.out_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| invalid(format!("scratch dir: {e}")))?;
            tmp.path().to_path_buf()
        }
    };
    let mut node = Node::create(&dir, community, Box::new(platform), start)?;
    node.log_mut().set_sync(false);
    if let Some(s) = &scorer {
        node.engine_mut()
            .set_fetcher(Box::new(HttpFetcher::new(Duration::from_secs(5)).rewrite(MOCK_SCORER_PREFIX, s.base_url())));
    }

    let mut r = Runner { node, now: start, labels: BTreeMap::new(), steps: Vec::new() };
    for (i, step) in loaded.script.steps.iter().enumerate() {
        let rep = r.step(i, step);
        r.steps.push(rep);
    }
    r.node.flush()?;
    let completeness = check_completeness(r.node.events(), &r.node.engine().state().actions);
    let replay = check_replay(&dir, &r.node);

    let st = r.node.engine().state();
    let actions = st
        .actions
        .iter()
        .map(|a| ActionSummary {
            id: a.id.clone(),
            action_type: a.action_type.clone(),
            status: a.proposal.status,
            policy: a.proposal.governing_policy.clone(),
            in_effect: a.in_effect,
        })
        .collect();
    let failed = r.steps.iter().filter(|s| !s.ok).count();
    Ok(Report {
        scenario: loaded.script.name.clone(),
        seed: loaded.script.seed,
        passed: failed == 0 && completeness.ok && replay.ok,
        assertions: Counts { passed: r.steps.len() - failed, failed },
        steps: r.steps,
        completeness,
        replay,
        final_clock: r.now,
        actions,
        platform: r.node.engine().platform().state(),
        audit_log: r.node.events().to_vec(),
    })
}

/// Loads and runs a script file.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<Report, GovError> {
    run(&load(path)?, opts)
}

/// Each action has at least one `ActionProposed`; decided actions have
/// exactly one disposition, and policy dispositions name their policy.
pub fn check_completeness(events: &[EngineEvent], actions: &[Action]) -> CheckOutcome {
    let mut proposed: BTreeMap<&ActionId, usize> = BTreeMap::new();
    let mut dispositions: BTreeMap<&ActionId, Vec<&EngineEvent>> = BTreeMap::new();
    for e in events {
        let Some(a) = &e.action else { continue };
        if e.kind == EventKind::ActionProposed {
            *proposed.entry(a).or_default() += 1;
        }
        if e.kind.is_disposition() {
            dispositions.entry(a).or_default().push(e);
        }
    }
    let mut problems = Vec::new();
    for a in actions {
        if proposed.get(&a.id).copied().unwrap_or(0) == 0 {
            problems.push(format!("{} has no ActionProposed", a.id));
        }
        let ds = dispositions.get(&a.id).map_or(&[][..], |v| v.as_slice());
        let want = usize::from(a.proposal.status != ProposalStatus::Proposed);
        let trial_only = !ds.is_empty() && ds.iter().all(|d| d.kind == EventKind::TrialDisposition);
        if ds.len() != want && !(want == 0 && trial_only && ds.len() == 1) {
            problems.push(format!("{} has {} dispositions, expected {want}", a.id, ds.len()));
        }
        for d in ds {
            if let Some(rec) = d.decision() {
                if rec.basis == Basis::Policy && rec.policy.is_none() {
                    problems.push(format!("{} was decided by a policy that is not named", a.id));
                }
            }
        }
    }
    if problems.is_empty() {
        CheckOutcome { ok: true, detail: format!("{} actions accounted for", actions.len()) }
    } else {
        CheckOutcome { ok: false, detail: problems.join("; ") }
    }
}

/// Rebuilds state from the on-disk log and compares serialized bytes.
pub fn check_replay(dir: &Path, node: &Node) -> CheckOutcome {
    let outcome = (|| -> Result<String, GovError> {
        let (events, report) = store::read_log(&dir.join(store::LOG_FILE))?;
        if let Some(why) = report.stopped {
            return Err(invalid(format!("log damaged: {why}")));
        }
        let replayed = store::replay(&events, Box::new(SandboxPlatform::default()), None)?;
        let live = serde_json::to_vec(&node.engine().canonical_state()).expect("state serializes");
        let again = serde_json::to_vec(&replayed.canonical_state()).expect("state serializes");
        let live_p = serde_json::to_vec(&node.engine().platform().state()).expect("state serializes");
        let again_p = serde_json::to_vec(&replayed.platform().state()).expect("state serializes");
        if live != again {
            return Err(invalid("replayed engine state differs from live state"));
        }
        if live_p != again_p {
            return Err(invalid("replayed platform state differs from live state"));
        }
        Ok(format!("{} records, {} state bytes identical", events.len(), live.len() + live_p.len()))
    })();
    match outcome {
        Ok(detail) => CheckOutcome { ok: true, detail },
        Err(e) => CheckOutcome { ok: false, detail: e.message },
    }
}

struct Runner {
    node: Node,
    now: Timestamp,
    labels: BTreeMap<String, ActionId>,
    steps: Vec<StepReport>,
}

/// Failure of one step: a message and, when useful, what was actually there.
struct Miss(String, Option<Json>);

impl From<GovError> for Miss {
    fn from(e: GovError) -> Miss {
        Miss(e.to_string(), None)
    }
}

fn miss(msg: impl Into<String>) -> Miss {
    Miss(msg.into(), None)
}

impl Runner {
    fn step(&mut self, index: usize, s: &Step) -> StepReport {
        let op = op_name(s);
        let result = if let Some(x) = &s.expect {
            self.expect(x).map(|()| None)
        } else {
            match self.command(s) {
                Err(m) => Err(m),
                Ok((cmd, label)) => match (self.node.apply(self.now, cmd), s.expect_error) {
                    (Ok(reply), None) => {
                        self.bind(label, &reply);
                        Ok(Some(reply_detail(&reply)))
                    }
                    (Ok(reply), Some(code)) => {
                        Err(Miss(format!("expected {code}, command succeeded"), serde_json::to_value(&reply).ok()))
                    }
                    (Err(e), Some(code)) if e.code == code => Ok(Some(format!("rejected with {code}"))),
                    (Err(e), _) => Err(Miss(format!("unexpected error {e}"), None)),
                },
            }
        };
        match result {
            Ok(detail) => StepReport { index, op, at: self.now, ok: true, detail, observed: None },
            Err(Miss(msg, observed)) => StepReport { index, op, at: self.now, ok: false, detail: Some(msg), observed },
        }
    }

    fn bind(&mut self, label: Option<&String>, reply: &Reply) {
        if let (Some(l), Reply::Submitted { action, .. }) = (label, reply) {
            self.labels.insert(l.clone(), action.clone());
        }
    }

    fn command<'s>(&mut self, s: &'s Step) -> Result<(Command, Option<&'s String>), Miss> {
        if let Some(p) = &s.platform_event {
            let user = self.user_ref(&p.user)?;
            let handle = self.handle_of(&user)?;
            return Ok((
                Command::PlatformEvent {
                    event_id: p.event_id.clone(),
                    actor_handle: handle,
                    action_type: p.action_type.clone(),
                    payload: self.resolve_payload(&p.payload)?,
                },
                p.label.as_ref(),
            ));
        }
        if let Some(p) = &s.propose {
            let trigger = match &p.trigger {
                None => None,
                Some(t) => Some(match t.strip_prefix('+') {
                    Some(rel) => self.now + Span::parse(rel).map_err(miss)?,
                    None => Timestamp::parse(t).map_err(miss)?,
                }),
            };
            let bundle = match &p.bundle {
                None => None,
                Some(b) => Some(BundleRequest {
                    kind: b.kind,
                    members: b
                        .members
                        .iter()
                        .map(|m| {
                            Ok(BundleMember { action_type: m.action_type.clone(), payload: self.resolve_payload(&m.payload)? })
                        })
                        .collect::<Result<_, Miss>>()?,
                }),
            };
            return Ok((
                Command::Submit(SubmitRequest {
                    initiator: self.user_ref(&p.user)?,
                    action_type: p.action_type.clone(),
                    payload: self.resolve_payload(&p.payload)?,
                    datetime_trigger: trigger,
                    bundle,
                }),
                p.label.as_ref(),
            ));
        }
        if let Some(v) = &s.vote {
            let value = match &v.value {
                Json::String(s) if s == "yes" => VoteValue::Boolean(true),
                Json::String(s) if s == "no" => VoteValue::Boolean(false),
                Json::Bool(b) => VoteValue::Boolean(*b),
                Json::Number(n) => VoteValue::Choice(
                    n.as_u64().and_then(|n| u32::try_from(n).ok()).ok_or_else(|| miss("vote option must be a positive integer"))?,
                ),
                other => return Err(miss(format!("vote value must be yes, no or an option number, got {other}"))),
            };
            return Ok((Command::Vote { voter: self.user_ref(&v.user)?, action: self.action_ref(&v.action)?, value }, None));
        }
        if let Some(sig) = &s.signal {
            let action = self.action_ref(&sig.action)?;
            let user = self.user_ref(&sig.user)?;
            let message = self.message_for(&action)?;
            return Ok((Command::Signal { message, handle: self.handle_of(&user)?, signal: sig.signal.clone() }, None));
        }
        if let Some(a) = &s.advance {
            self.now = self.now + Span::parse(a).map_err(miss)?;
            return Ok((Command::Tick, None));
        }
        Ok((Command::Tick, None))
    }

    /// The newest governance message posted for `action`.
    fn message_for(&self, action: &ActionId) -> Result<MessageRef, Miss> {
        let st = self.node.engine().platform().state();
        st["governance_messages"]
            .as_array()
            .into_iter()
            .flatten()
            .filter(|m| m["action"].as_str() == Some(action.as_str()))
            .filter_map(|m| m["id"].as_str())
            .next_back()
            .map(MessageRef::from)
            .ok_or_else(|| miss(format!("no governance message for {action}")))
    }

    fn handle_of(&self, user: &UserId) -> Result<String, Miss> {
        self.node
            .engine()
            .community()
            .users
            .get(user)
            .map(|u| u.platform_handle.clone())
            .ok_or_else(|| miss(format!("unknown member `{user}`")))
    }

    /// `$label` or `$label.path`: see [`Runner::deref`].
    fn lookup(&self, r: &str) -> Result<Json, Miss> {
        let body = r.strip_prefix('$').ok_or_else(|| miss(format!("`{r}` is not a reference")))?;
        let (label, path) = body.split_once('.').unwrap_or((body, ""));
        let id = self.labels.get(label).ok_or_else(|| miss(format!("no action labelled `{label}`")))?;
        let a = self
            .node
            .engine()
            .state()
            .action(id)
            .ok_or_else(|| miss(format!("action {id} vanished")))?;
        let view = json!({
            "id": a.id,
            "initiator": a.initiator,
            "payload": a.payload,
            "data": a.data,
            "members": a.bundle.as_ref().map(|b| b.members.clone()).unwrap_or_default(),
        });
        if path.is_empty() {
            return Ok(view["id"].clone());
        }
        lookup_path(&view, path).cloned().ok_or_else(|| miss(format!("`{r}` does not resolve")))
    }

    fn action_ref(&self, r: &str) -> Result<ActionId, Miss> {
        if !r.starts_with('$') {
            return Ok(ActionId::from(r));
        }
        match self.lookup(r)? {
            Json::String(s) => Ok(ActionId::from(s)),
            other => Err(miss(format!("`{r}` is {other}, not an action id"))),
        }
    }

    fn user_ref(&self, r: &str) -> Result<UserId, Miss> {
        if !r.starts_with('$') {
            return Ok(UserId::from(r));
        }
        match self.lookup(r)? {
            Json::String(s) => Ok(UserId::from(s)),
            other => Err(miss(format!("`{r}` is {other}, not a user id"))),
        }
    }

    /// String values starting with `$` are references.
    fn resolve_payload(&self, p: &Map<String, Json>) -> Result<Map<String, Json>, Miss> {
        p.iter()
            .map(|(k, v)| match v {
                Json::String(s) if s.starts_with('$') => Ok((k.clone(), self.lookup(s)?)),
                _ => Ok((k.clone(), v.clone())),
            })
            .collect()
    }

    fn expect(&self, x: &Expect) -> Result<(), Miss> {
        let engine = self.node.engine();
        let st = engine.state();
        if let Some(r) = &x.action {
            let id = self.action_ref(r)?;
            let a = st.action(&id).ok_or_else(|| miss(format!("no action {id}")))?;
            let observed = || {
                Some(json!({
                    "action": a.id,
                    "status": a.proposal.status,
                    "policy": a.proposal.governing_policy,
                    "in_effect": a.in_effect,
                    "decided_at": a.proposal.decided_at,
                    "tally": st.tally(&a.id),
                }))
            };
            if let Some(s) = x.status {
                if a.proposal.status != s {
                    return Err(Miss(format!("{id}: expected status {}", s.as_str()), observed()));
                }
            }
            if let Some(p) = &x.policy {
                if a.proposal.governing_policy.as_ref().map(PolicyId::as_str) != Some(p.as_str()) {
                    return Err(Miss(format!("{id}: expected governing policy {p}"), observed()));
                }
            }
            if let Some(e) = x.in_effect {
                if a.in_effect != e {
                    return Err(Miss(format!("{id}: expected in_effect {e}"), observed()));
                }
            }
            if let Some(d) = &x.decided_at {
                let want = if d == "now" { self.now } else { Timestamp::parse(d).map_err(miss)? };
                if a.proposal.decided_at != Some(want) {
                    return Err(Miss(format!("{id}: expected decided_at {want}"), observed()));
                }
            }
            if let Some(b) = x.basis {
                let got = self
                    .node
                    .events()
                    .iter()
                    .filter(|e| e.action.as_ref() == Some(&id))
                    .find_map(EngineEvent::decision)
                    .map(|d| d.basis);
                if got != Some(b) {
                    return Err(Miss(format!("{id}: expected basis {b:?}"), Some(json!({"basis": got}))));
                }
            }
            if let Some(c) = &x.data {
                check_path(&serde_json::to_value(&a.data).expect("data serializes"), c)?;
            }
            if let Some(t) = &x.tally {
                let got = st.tally(&id).unwrap_or_default();
                let bad = t.yes.is_some_and(|y| y != got.yes)
                    || t.no.is_some_and(|n| n != got.no)
                    || t.choices.as_ref().is_some_and(|c| *c != got.choices);
                if bad {
                    return Err(Miss(format!("{id}: tally mismatch"), serde_json::to_value(&got).ok()));
                }
            }
        }
        if let Some(c) = &x.platform {
            check_path(&engine.platform().state(), c)?;
        }
        if let Some(c) = &x.policy_data {
            // An id or an enacted policy's name.
            let p = st
                .policy(&PolicyId::from(c.policy.as_str()))
                .or_else(|| engine.community().policy_by_name(&c.policy))
                .ok_or_else(|| miss(format!("no policy {}", c.policy)))?;
            check_path(&serde_json::to_value(&p.data).expect("data serializes"), &c.check)?;
        }
        if let Some(c) = &x.role {
            let role = engine
                .community()
                .roles
                .get(&RoleId::from(c.name.as_str()))
                .ok_or_else(|| miss(format!("no role {}", c.name)))?;
            let mut want: Vec<UserId> = c.members.iter().map(|m| self.user_ref(m)).collect::<Result<_, _>>()?;
            want.sort();
            let got: Vec<UserId> = role.members.iter().cloned().collect();
            if got != want {
                return Err(Miss(format!("role {} membership mismatch", c.name), serde_json::to_value(&got).ok()));
            }
        }
        if let Some(c) = &x.events {
            let action = c.action.as_deref().map(|r| self.action_ref(r)).transpose()?;
            let n = self
                .node
                .events()
                .iter()
                .filter(|e| e.kind == c.kind)
                .filter(|e| action.as_ref().is_none_or(|a| e.action.as_ref() == Some(a)))
                .filter(|e| {
                    c.policy.as_ref().is_none_or(|p| {
                        e.policy.as_ref().map(PolicyId::as_str) == Some(p.as_str())
                            || e.deciding_policy.as_ref().map(PolicyId::as_str) == Some(p.as_str())
                    })
                })
                .filter(|e| c.payload.iter().all(|(k, v)| e.payload.get(k) == Some(v)))
                .count();
            if c.count.is_some_and(|want| want != n) || c.at_least.is_some_and(|min| n < min) {
                return Err(Miss(format!("{:?} events: found {n}", c.kind), Some(json!(n))));
            }
        }
        Ok(())
    }
}

fn op_name(s: &Step) -> String {
    let name = if s.platform_event.is_some() {
        "platform_event"
    } else if s.propose.is_some() {
        "propose"
    } else if s.vote.is_some() {
        "vote"
    } else if s.signal.is_some() {
        "signal"
    } else if s.advance.is_some() {
        "advance"
    } else if s.tick.is_some() {
        "tick"
    } else {
        "expect"
    };
    name.to_string()
}

fn reply_detail(r: &Reply) -> String {
    let decided = |ds: &[govkit_core::engine::DecisionRecord]| {
        ds.iter().map(|d| format!("{}={}", d.action, d.status.as_str())).collect::<Vec<_>>().join(",")
    };
    match r {
        Reply::Submitted { action, status, decisions } => {
            format!("{action} {} [{}]", status.as_str(), decided(decisions))
        }
        Reply::Voted { action, tally, decisions, .. } => {
            format!("{action} yes={} no={} choices={:?} [{}]", tally.yes, tally.no, tally.choices, decided(decisions))
        }
        Reply::Ticked { decisions } => format!("[{}]", decided(decisions)),
        Reply::Ignored { reason } => format!("ignored: {reason}"),
    }
}

pub fn lookup_path<'a>(v: &'a Json, path: &str) -> Option<&'a Json> {
    path.split('.').filter(|s| !s.is_empty()).try_fold(v, |cur, seg| match cur {
        Json::Array(xs) => seg.parse::<usize>().ok().and_then(|i| xs.get(i)),
        Json::Object(m) => m.get(seg),
        _ => None,
    })
}

fn check_path(doc: &Json, c: &PathCheck) -> Result<(), Miss> {
    let got = lookup_path(doc, &c.path);
    if let Some(e) = c.exists {
        if got.is_some() != e {
            return Err(Miss(format!("{}: expected exists={e}", c.path), got.cloned()));
        }
    }
    if let Some(want) = &c.equals {
        if got != Some(want) {
            return Err(Miss(format!("{}: expected {want}", c.path), got.cloned()));
        }
    }
    if let Some(n) = c.len {
        let len = match got {
            Some(Json::Array(xs)) => Some(xs.len()),
            Some(Json::Object(m)) => Some(m.len()),
            Some(Json::String(s)) => Some(s.chars().count()),
            _ => None,
        };
        if len != Some(n) {
            return Err(Miss(format!("{}: expected length {n}", c.path), got.cloned()));
        }
    }
    if let Some(want) = c.distinct {
        let distinct = match got {
            Some(Json::Array(xs)) => xs.iter().enumerate().all(|(i, x)| !xs[..i].contains(x)),
            _ => false,
        };
        if distinct != want {
            return Err(Miss(format!("{}: expected distinct={want}", c.path), got.cloned()));
        }
    }
    Ok(())
}
