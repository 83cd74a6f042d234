
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::ids::{ActionId, PolicyId};
use crate::model::ProposalStatus;
use crate::time::Timestamp;

/// Kinds of audit-log records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    /// Genesis: the full initial state.
    CommunityBootstrapped,
    /// A command entered the engine; everything up to the next one derives from it.
    CommandAccepted,
    /// An answer from outside the engine (HTTP fetch, remote platform) kept for replay.
    ExternalResponse,
    ActionProposed,
    ActionScheduled,
    ActionActivated,
    GoverningPolicyPinned,
    VoteCast,
    VoteRejected,
    SignalIgnored,
    EventDropped,
    PolicyFunctionError,
    Decision,
    TrialDisposition,
    EffectApplied,
    NotificationDelivered,
    ActionExecuted,
    ActionReverted,
    ExecutionFailed,
    PolicyEnacted,
    PolicyRetired,
    ConfigChanged,
    DocumentRevised,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<EventKind> {
        serde_json::from_value(Json::String(s.into())).ok()
    }

    /// Decision-like records: exactly one of these exists per action.
    pub fn is_disposition(self) -> bool {
        matches!(self, EventKind::Decision | EventKind::TrialDisposition)
    }
}

/// Why an action reached its disposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// The governing policy decided.
    Policy,
    /// The initiator holds EXECUTE on the action type.
    Bypass,
    /// No policy matched; the community default applied.
    Ungoverned,
    /// The initiator lacks PROPOSE on the action type.
    Denied,
    /// A policy proposed the action and executed it in the same step.
    PolicyExecuted,
    /// Decided together with the bundle the action belongs to.
    Bundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub offset: u64,
    pub ts: Timestamp,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deciding_policy: Option<PolicyId>,
    #[serde(default, skip_serializing_if = "Json::is_null")]
    pub payload: Json,
}

/// A disposition reached while processing one command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub action: ActionId,
    pub status: ProposalStatus,
    pub basis: Basis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyId>,
    pub trial: bool,
}

impl EngineEvent {
    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Json::as_str)
    }

    pub fn decision(&self) -> Option<DecisionRecord> {
        if !self.kind.is_disposition() {
            return None;
        }
        let status_key = if self.kind == EventKind::TrialDisposition { "would" } else { "status" };
        let status = serde_json::from_value(self.payload.get(status_key)?.clone()).ok()?;
        let basis = match self.payload.get("basis") {
            Some(b) => serde_json::from_value(b.clone()).ok()?,
            None => Basis::Policy,
        };
        Some(DecisionRecord {
            action: self.action.clone()?,
            status,
            basis,
            policy: self.deciding_policy.clone(),
            trial: self.kind == EventKind::TrialDisposition,
        })
    }
}
