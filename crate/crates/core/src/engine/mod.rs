//! The evaluation pipeline.
//!
//! The engine is a single-writer state machine driven by [`Command`]s. Every
//! accepted command is recorded as a `CommandAccepted` event followed by the
//! events it caused, so replaying the commands over the genesis state
//! regenerates the log and the final state exactly.

mod event;
mod host;
mod pipeline;

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

pub use event::{Basis, DecisionRecord, EngineEvent, EventKind};
pub use host::{capability_of_call, capability_violations, Capability, Effect, MAX_FETCH_BYTES};

use crate::dsl::{parse_policy_source, ExecutionBudget, PolicyProgram};
use crate::error::{ErrorCode, GovError, Result};
use crate::ids::*;
use crate::model::*;
use crate::platform::{Platform, VoteKind};
use crate::time::Timestamp;

/// Answers `http_fetch` calls. Implementations enforce their own timeout
/// and response-size limits.
pub trait Fetcher: Send {
    fn fetch(&mut self, url: &str, query: &BTreeMap<String, String>) -> Result<Json>;
}

/// Monotonic wall-clock source used only for the evaluation time limit.
pub trait Stopwatch: Send {
    fn elapsed_ms(&self) -> u64;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMember {
    pub action_type: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleRequest {
    pub kind: BundleKind,
    pub members: Vec<BundleMember>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub initiator: UserId,
    pub action_type: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datetime_trigger: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleRequest>,
}

/// Everything that can change engine state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    /// A proposal made through the web surface.
    Submit(SubmitRequest),
    /// Something a member did on the platform.
    PlatformEvent {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event_id: Option<String>,
        actor_handle: String,
        action_type: String,
        #[serde(default)]
        payload: Map<String, Json>,
    },
    Vote { voter: UserId, action: ActionId, value: VoteValue },
    /// A reaction or reply on a governance message.
    Signal { message: MessageRef, handle: String, signal: String },
    Tick,
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum Reply {
    Submitted { action: ActionId, status: ProposalStatus, decisions: Vec<DecisionRecord> },
    Voted { action: ActionId, tally: Tally, status: ProposalStatus, decisions: Vec<DecisionRecord> },
    Ticked { decisions: Vec<DecisionRecord> },
    Ignored { reason: String },
}

impl Reply {
    pub fn decisions(&self) -> &[DecisionRecord] {
        match self {
            Reply::Submitted { decisions, .. } | Reply::Voted { decisions, .. } | Reply::Ticked { decisions } => {
                decisions
            }
            Reply::Ignored { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalMeta {
    /// Index of the governing stage within a policy bundle (0 otherwise).
    pub stage: usize,
    pub stage_started_at: Timestamp,
    /// Stages whose notify has run.
    pub notified: BTreeSet<usize>,
    pub intercepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listener {
    pub action: ActionId,
    pub vote_kind: VoteKind,
    pub live: bool,
}

/// Serializable engine state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineState {
    pub community: Community,
    pub actions: Vec<Action>,
    pub eval: BTreeMap<ActionId, EvalMeta>,
    /// Active, pinned, undecided actions in submission order.
    pub pending: Vec<ActionId>,
    /// Actions waiting for their datetime trigger.
    pub scheduled: Vec<ActionId>,
    pub listeners: BTreeMap<MessageRef, Listener>,
    pub document_history: Vec<DocumentRevision>,
    /// Policies retired while actions they govern were still pending.
    pub retired_policies: BTreeMap<PolicyId, Policy>,
    pub clock: Timestamp,
    pub next_action: u64,
    pub next_enact_seq: u64,
    pub seen_event_ids: BTreeSet<String>,
}

impl EngineState {
    pub fn new(community: Community, at: Timestamp) -> Self {
        let next_enact_seq = community.policies.iter().map(|p| p.enact_seq + 1).max().unwrap_or(1);
        let document_history = community
            .documents
            .iter()
            .map(|d| DocumentRevision {
                document: d.id.clone(),
                version: d.version,
                title: d.title.clone(),
                body: d.body.clone(),
                action: None,
                reverted: false,
                at,
            })
            .collect();
        EngineState {
            community,
            actions: Vec::new(),
            eval: BTreeMap::new(),
            pending: Vec::new(),
            scheduled: Vec::new(),
            listeners: BTreeMap::new(),
            document_history,
            retired_policies: BTreeMap::new(),
            clock: at,
            next_action: 1,
            next_enact_seq,
            seen_event_ids: BTreeSet::new(),
        }
    }

    fn index_of(id: &ActionId) -> Option<usize> {
        id.as_str().strip_prefix("a-")?.parse::<usize>().ok()?.checked_sub(1)
    }

    pub fn action(&self, id: &ActionId) -> Option<&Action> {
        self.actions.get(Self::index_of(id)?).filter(|a| &a.id == id)
    }

    pub(crate) fn action_mut(&mut self, id: &ActionId) -> Option<&mut Action> {
        let i = Self::index_of(id)?;
        self.actions.get_mut(i).filter(|a| &a.id == id)
    }

    /// Enacted or retired-but-still-governing policy.
    pub fn policy(&self, id: &PolicyId) -> Option<&Policy> {
        self.community.policy(id).or_else(|| self.retired_policies.get(id))
    }

    pub(crate) fn policy_mut(&mut self, id: &PolicyId) -> Option<&mut Policy> {
        if let Some(p) = self.community.policies.iter_mut().find(|p| &p.id == id) {
            return Some(p);
        }
        self.retired_policies.get_mut(id)
    }

    pub fn tally(&self, id: &ActionId) -> Option<Tally> {
        let a = self.action(id)?;
        Some(a.proposal.tally(a.bundle.as_ref().map_or(0, |b| b.members.len())))
    }
}

/// State captured at a command boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub as_of: u64,
    pub state: EngineState,
    pub platform: Json,
}

pub(crate) struct Io {
    pub platform: Box<dyn Platform>,
    pub fetcher: Option<Box<dyn Fetcher>>,
    pub stopwatch: Option<Box<dyn Stopwatch>>,
    /// Recorded external answers, consumed in order during replay.
    pub tape: Option<VecDeque<Json>>,
    pub events: Vec<EngineEvent>,
    pub next_offset: u64,
    pub budget: ExecutionBudget,
}

impl Io {
    pub fn emit(
        &mut self,
        ts: Timestamp,
        kind: EventKind,
        action: Option<&ActionId>,
        policy: Option<&PolicyId>,
        payload: Json,
    ) {
        let deciding_policy = if kind.is_disposition() { policy.cloned() } else { None };
        self.events.push(EngineEvent {
            offset: self.next_offset,
            ts,
            kind,
            action: action.cloned(),
            policy: policy.cloned(),
            deciding_policy,
            payload,
        });
        self.next_offset += 1;
    }

    /// Performs an outside call, or takes its recorded answer when replaying.
    pub fn external(
        &mut self,
        ts: Timestamp,
        call: &str,
        action: Option<&ActionId>,
        live: impl FnOnce(&mut Io) -> Result<Json>,
    ) -> Result<Json> {
        let result = match self.tape.as_mut() {
            Some(tape) => {
                let rec = tape.pop_front().ok_or_else(|| {
                    GovError::new(ErrorCode::StorageFailure, format!("replay diverged: no recorded answer for {call}"))
                })?;
                if rec.get("call").and_then(Json::as_str) != Some(call) {
                    return Err(GovError::new(
                        ErrorCode::StorageFailure,
                        format!("replay diverged: expected {call}, log has {}", rec["call"]),
                    ));
                }
                match rec.get("error") {
                    Some(e) => Err(serde_json::from_value(e.clone()).unwrap_or_else(|_| {
                        GovError::new(ErrorCode::RuntimeError, "unreadable recorded error")
                    })),
                    None => Ok(rec.get("ok").cloned().unwrap_or(Json::Null)),
                }
            }
            None => live(self),
        };
        let payload = match &result {
            Ok(v) => json!({"call": call, "ok": v}),
            Err(e) => json!({"call": call, "error": e}),
        };
        self.emit(ts, EventKind::ExternalResponse, action, None, payload);
        result
    }
}

/// The governance engine for one community.
pub struct Engine {
    pub(crate) st: EngineState,
    pub(crate) io: Io,
    programs: BTreeMap<PolicyId, (String, Arc<PolicyProgram>)>,
    pub(crate) depth: u32,
}

pub(crate) const MAX_EFFECT_DEPTH: u32 = 8;

impl Engine {
    /// Starts a new log: emits the genesis event holding the full initial state.
    pub fn genesis(community: Community, platform: Box<dyn Platform>, at: Timestamp) -> Result<Engine> {
        community.validate()?;
        let st = EngineState::new(community, at);
        let mut e = Engine::assemble(st, platform, 0);
        let platform_state = e.io.platform.state();
        e.io.emit(
            at,
            EventKind::CommunityBootstrapped,
            None,
            None,
            json!({"state": e.st, "platform": platform_state}),
        );
        Ok(e)
    }

    /// Rebuilds the engine from a genesis event without emitting anything.
    pub fn from_genesis(event: &EngineEvent, mut platform: Box<dyn Platform>) -> Result<Engine> {
        if event.kind != EventKind::CommunityBootstrapped || event.offset != 0 {
            return Err(GovError::new(ErrorCode::InvalidInput, "first record is not a genesis event"));
        }
        let st: EngineState = serde_json::from_value(event.payload["state"].clone())
            .map_err(|e| GovError::new(ErrorCode::InvalidInput, format!("bad genesis state: {e}")))?;
        platform.restore(&event.payload["platform"])?;
        Ok(Engine::assemble(st, platform, 1))
    }

    pub fn from_snapshot(snap: &EngineSnapshot, mut platform: Box<dyn Platform>) -> Result<Engine> {
        platform.restore(&snap.platform)?;
        Ok(Engine::assemble(snap.state.clone(), platform, snap.as_of + 1))
    }

    fn assemble(st: EngineState, platform: Box<dyn Platform>, next_offset: u64) -> Engine {
        Engine {
            st,
            io: Io {
                platform,
                fetcher: None,
                stopwatch: None,
                tape: None,
                events: Vec::new(),
                next_offset,
                budget: ExecutionBudget::default(),
            },
            programs: BTreeMap::new(),
            depth: 0,
        }
    }

    pub fn set_fetcher(&mut self, f: Box<dyn Fetcher>) {
        self.io.fetcher = Some(f);
    }

    pub fn set_stopwatch(&mut self, s: Box<dyn Stopwatch>) {
        self.io.stopwatch = Some(s);
    }

    pub fn set_budget(&mut self, b: ExecutionBudget) {
        self.io.budget = b;
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            as_of: self.io.next_offset.saturating_sub(1),
            state: self.st.clone(),
            platform: self.io.platform.state(),
        }
    }

    /// Canonical serialization of everything replay must reproduce.
    pub fn canonical_state(&self) -> Json {
        json!({"engine": self.st, "platform": self.io.platform.state()})
    }

    pub fn state(&self) -> &EngineState {
        &self.st
    }

    pub fn community(&self) -> &Community {
        &self.st.community
    }

    pub fn platform(&self) -> &dyn Platform {
        self.io.platform.as_ref()
    }

    pub fn now(&self) -> Timestamp {
        self.st.clock
    }

    /// Offset the next event will receive.
    pub fn next_offset(&self) -> u64 {
        self.io.next_offset
    }

    /// Removes and returns the events produced since the last call.
    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        core::mem::take(&mut self.io.events)
    }

    /// Runs one command at instant `at`. Rejections that leave no trace
    /// (bad input, unknown ids) return `Err` with no events; audited
    /// rejections such as a stale vote return `Err` after logging.
    pub fn apply(&mut self, at: Timestamp, cmd: Command) -> Result<Reply> {
        if at < self.st.clock {
            return Err(GovError::new(
                ErrorCode::ClockRegression,
                format!("command at {at} precedes engine clock {}", self.st.clock),
            ));
        }
        if let Some(reply) = self.precheck(&cmd)? {
            return Ok(reply);
        }
        self.st.clock = at;
        let first = self.io.events.len();
        self.io.emit(at, EventKind::CommandAccepted, None, None, json!({"command": cmd}));
        let res = self.dispatch(cmd);
        let decisions = self.io.events[first..].iter().filter_map(EngineEvent::decision).collect();
        res.map(|r| with_decisions(r, decisions))
    }

    /// Replays one logged command with its recorded external answers.
    pub fn replay_command(&mut self, at: Timestamp, cmd: Command, tape: VecDeque<Json>) -> Result<Reply> {
        self.io.tape = Some(tape);
        let r = self.apply(at, cmd);
        self.io.tape = None;
        r
    }

    pub(crate) fn program(&mut self, policy: &PolicyId) -> Result<Arc<PolicyProgram>> {
        let p = self
            .st
            .policy(policy)
            .ok_or_else(|| GovError::new(ErrorCode::NotFound, format!("policy {policy} not found")))?;
        if let Some((src, prog)) = self.programs.get(policy) {
            if *src == p.source {
                return Ok(prog.clone());
            }
        }
        let prog = Arc::new(parse_policy_source(&p.source).map_err(GovError::from)?);
        self.programs.insert(policy.clone(), (p.source.clone(), prog.clone()));
        Ok(prog)
    }
}

fn with_decisions(r: Reply, d: Vec<DecisionRecord>) -> Reply {
    match r {
        Reply::Submitted { action, status, .. } => Reply::Submitted { action, status, decisions: d },
        Reply::Voted { action, tally, status, .. } => Reply::Voted { action, tally, status, decisions: d },
        Reply::Ticked { .. } => Reply::Ticked { decisions: d },
        other => other,
    }
}
