//! Governance domain types shared by every other module.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, GovError, Result};
use crate::ids::*;
use crate::time::{Span, Timestamp};

/// Maximum serialized size of one data store.
pub const DATA_STORE_CAP: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Layer {
    Platform,
    Constitution,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Platform => "PLATFORM",
            Layer::Constitution => "CONSTITUTION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PermissionKind {
    View,
    Propose,
    Execute,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permission {
    pub action_type: String,
    pub kind: PermissionKind,
}

impl Permission {
    pub fn new(action_type: impl Into<String>, kind: PermissionKind) -> Self {
        Permission { action_type: action_type.into(), kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub display_name: String,
    pub platform_handle: String,
    /// Read-only profile attributes visible to policies (edit counts, tenure, ...).
    #[serde(default)]
    pub attributes: DataStore,
}

impl User {
    pub fn new(id: impl Into<String>) -> Self {
        let id: String = id.into();
        User {
            display_name: id.clone(),
            platform_handle: id.clone(),
            id: UserId(id),
            attributes: DataStore::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub id: RoleId,
    pub name: String,
    pub permissions: BTreeSet<Permission>,
    pub members: BTreeSet<UserId>,
}

impl Role {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        Role {
            id: RoleId(name.clone()),
            name,
            permissions: BTreeSet::new(),
            members: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocumentId,
    pub title: String,
    /// Markdown text.
    pub body: String,
    pub version: u64,
}

/// One entry in the append-only history of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRevision {
    pub document: DocumentId,
    pub version: u64,
    pub title: String,
    pub body: String,
    pub action: Option<ActionId>,
    pub reverted: bool,
    pub at: Timestamp,
}

/// A JSON object attached to an action, a policy or a user.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataStore(pub BTreeMap<String, serde_json::Value>);

impl DataStore {
    pub fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.0.get(key)
    }

    /// Sets `key`, refusing writes that would push the store past the cap.
    pub fn set(&mut self, key: impl Into<String>, value: serde_json::Value) -> Result<()> {
        let key = key.into();
        let prev = self.0.insert(key.clone(), value);
        let size = self.serialized_len();
        if size > DATA_STORE_CAP {
            match prev {
                Some(p) => self.0.insert(key, p),
                None => self.0.remove(&key),
            };
            return Err(GovError::new(
                ErrorCode::InvalidInput,
                format!("data store would grow to {size} bytes (cap {DATA_STORE_CAP})"),
            ));
        }
        Ok(())
    }

    pub fn serialized_len(&self) -> usize {
        serde_json::to_vec(&self.0).map(|v| v.len()).unwrap_or(usize::MAX)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_json_object(map: serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let store = DataStore(map.into_iter().collect());
        if store.serialized_len() > DATA_STORE_CAP {
            return Err(GovError::new(ErrorCode::InvalidInput, "data store exceeds 64 KiB"));
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposalStatus {
    Proposed,
    Passed,
    Failed,
}

impl ProposalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalStatus::Proposed => "PROPOSED",
            ProposalStatus::Passed => "PASSED",
            ProposalStatus::Failed => "FAILED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VoteValue {
    Boolean(bool),
    /// 1-based option number.
    Choice(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserVote {
    pub voter: UserId,
    pub action: ActionId,
    #[serde(flatten)]
    pub value: VoteValue,
    pub cast_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub status: ProposalStatus,
    pub created_at: Timestamp,
    pub decided_at: Option<Timestamp>,
    pub votes: Vec<UserVote>,
    pub governing_policy: Option<PolicyId>,
}

impl Proposal {
    pub fn new(created_at: Timestamp) -> Self {
        Proposal {
            status: ProposalStatus::Proposed,
            created_at,
            decided_at: None,
            votes: Vec::new(),
            governing_policy: None,
        }
    }

    /// Stores `vote`, replacing any earlier vote by the same voter.
    pub fn cast(&mut self, vote: UserVote) {
        self.votes.retain(|v| v.voter != vote.voter);
        self.votes.push(vote);
    }

    pub fn tally(&self, options: usize) -> Tally {
        let mut t = Tally { yes: 0, no: 0, choices: alloc::vec![0; options] };
        for v in &self.votes {
            match v.value {
                VoteValue::Boolean(true) => t.yes += 1,
                VoteValue::Boolean(false) => t.no += 1,
                VoteValue::Choice(c) => {
                    if let Some(slot) = t.choices.get_mut(c as usize - 1) {
                        *slot += 1;
                    }
                }
            }
        }
        t
    }

    /// Moves the proposal to a terminal status. Only the first decision sticks.
    pub fn decide(&mut self, status: ProposalStatus, at: Timestamp) -> bool {
        if self.status != ProposalStatus::Proposed || status == ProposalStatus::Proposed {
            return false;
        }
        self.status = status;
        self.decided_at = Some(at);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub yes: u32,
    pub no: u32,
    /// Votes per option, index 0 is option 1.
    pub choices: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    PlatformEvent,
    WebProposal,
    PolicyGenerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BundleKind {
    Election,
    Combination,
}

/// Present on actions that are bundles of other actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub kind: BundleKind,
    pub members: Vec<ActionId>,
}

pub const BUNDLE_ACTION_TYPE: &str = "ActionBundle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub id: ActionId,
    pub action_type: String,
    pub layer: Layer,
    pub initiator: UserId,
    pub payload: serde_json::Map<String, serde_json::Value>,
    pub proposal: Proposal,
    pub data: DataStore,
    pub datetime_trigger: Option<Timestamp>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleSpec>,
    /// Set on members of a bundle; such actions are decided with their bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_of: Option<ActionId>,
    /// Whether the action's effect is currently in force on its target
    /// (platform or governance state).
    pub in_effect: bool,
    /// Inverse record captured when a constitution action executes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undo: Option<serde_json::Value>,
}

impl Action {
    pub fn is_active(&self, now: Timestamp) -> bool {
        self.datetime_trigger.is_none_or(|t| t <= now)
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(|v| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRef {
    pub bundle: PolicyBundleId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub id: PolicyId,
    pub name: String,
    pub layer: Layer,
    pub source: String,
    pub description: String,
    pub precedence: i64,
    pub enacted_at: Timestamp,
    /// Monotone enactment counter, breaks ties between equal timestamps.
    pub enact_seq: u64,
    pub trial_mode: bool,
    pub data: DataStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub id: PolicyBundleId,
    pub name: String,
    pub stages: Vec<PolicyId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultDisposition {
    #[default]
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityConfig {
    pub default_disposition: DefaultDisposition,
    /// URL prefixes policies may fetch from. Empty disables external calls.
    pub http_allowlist: Vec<String>,
    pub tick_period: Span,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        CommunityConfig {
            default_disposition: DefaultDisposition::Allow,
            http_allowlist: Vec::new(),
            tick_period: Span::seconds(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTypeInfo {
    pub name: String,
    pub layer: Layer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Community {
    pub id: CommunityId,
    pub name: String,
    pub members: BTreeSet<UserId>,
    pub users: BTreeMap<UserId, User>,
    pub base_role: RoleId,
    pub roles: BTreeMap<RoleId, Role>,
    pub documents: Vec<Document>,
    pub policies: Vec<Policy>,
    pub policy_bundles: Vec<PolicyBundle>,
    pub action_types: BTreeMap<String, ActionTypeInfo>,
    pub adapter: String,
    pub rng_seed: u64,
    pub config: CommunityConfig,
}

impl Community {
    pub fn external_calls_enabled(&self) -> bool {
        !self.config.http_allowlist.is_empty()
    }

    pub fn is_member(&self, user: &UserId) -> bool {
        self.members.contains(user)
    }

    pub fn user_by_handle(&self, handle: &str) -> Option<&User> {
        self.users.values().find(|u| u.platform_handle == handle)
    }

    pub fn roles_of<'a>(&'a self, user: &'a UserId) -> impl Iterator<Item = &'a Role> + 'a {
        self.roles.values().filter(move |r| r.members.contains(user))
    }

    pub fn policy(&self, id: &PolicyId) -> Option<&Policy> {
        self.policies.iter().find(|p| &p.id == id)
    }

    pub fn policy_by_name(&self, name: &str) -> Option<&Policy> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn document(&self, id: &DocumentId) -> Option<&Document> {
        self.documents.iter().find(|d| &d.id == id)
    }

    pub fn constitution_policy_count(&self) -> usize {
        self.policies.iter().filter(|p| p.layer == Layer::Constitution).count()
    }

    pub fn action_layer(&self, action_type: &str) -> Result<Layer> {
        self.action_types
            .get(action_type)
            .map(|i| i.layer)
            .ok_or_else(|| {
                GovError::new(ErrorCode::UnknownActionType, format!("unknown action type `{action_type}`"))
            })
    }

    /// True iff any role of `user` carries `(action_type, kind)`.
    pub fn check_permission(&self, user: &UserId, kind: PermissionKind, action_type: &str) -> Result<bool> {
        self.action_layer(action_type)?;
        let wanted = Permission::new(action_type, kind);
        Ok(self.roles_of(user).any(|r| r.permissions.contains(&wanted)))
    }

    /// Members of `role`, or every member when no role is given. Quorum
    /// denominators are computed from this at check time.
    pub fn eligible_voters(&self, restrict_to_role: Option<&RoleId>) -> Result<BTreeSet<UserId>> {
        match restrict_to_role {
            None => Ok(self.members.clone()),
            Some(r) => self
                .roles
                .get(r)
                .map(|role| role.members.clone())
                .ok_or_else(|| GovError::new(ErrorCode::InvalidInput, format!("role `{r}` is not part of this community"))),
        }
    }

    /// Admits a new member: adds them to the base role.
    pub fn admit(&mut self, user: User) {
        let id = user.id.clone();
        self.members.insert(id.clone());
        self.users.insert(id.clone(), user);
        if let Some(base) = self.roles.get_mut(&self.base_role) {
            base.members.insert(id);
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let base = self
            .roles
            .get(&self.base_role)
            .ok_or_else(|| GovError::new(ErrorCode::InvalidInput, "base role missing"))?;
        if base.members != self.members {
            return Err(GovError::new(ErrorCode::InvalidInput, "base role must contain exactly the members"));
        }
        if self.constitution_policy_count() == 0 {
            return Err(GovError::new(ErrorCode::LastConstitutionPolicy, "no constitution policy enacted"));
        }
        for role in self.roles.values() {
            for p in &role.permissions {
                if !self.action_types.contains_key(&p.action_type) {
                    return Err(GovError::new(
                        ErrorCode::InvalidInput,
                        format!("role `{}` references unknown action type `{}`", role.name, p.action_type),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Quorum helper: the smallest voter count reaching `percent` of `eligible`.
pub fn quorum(eligible: usize, percent: u32) -> usize {
    (eligible * percent as usize).div_ceil(100)
}
