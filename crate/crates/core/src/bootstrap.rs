//! Community creation and the starter governance kit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::catalog;
use crate::dsl::parse_policy_source;
use crate::error::{ErrorCode, GovError, Result};
use crate::ids::*;
use crate::model::*;
use crate::platform::AdapterDescriptor;
use crate::time::Timestamp;
use serde_json::Value as Json;

pub const BASE_ROLE: &str = "base";
pub const STARTER_POLICY_ID: &str = "p-starter";
pub const STARTER_POLICY_NAME: &str = "starter-majority";
pub const STARTER_DOCUMENT_ID: &str = "d-charter";

/// Passes once more than half of all members vote yes; fails on a blocking no count or after seven days.
pub const STARTER_POLICY_SOURCE: &str = r#"# description: Constitution changes pass when a majority of all members vote yes within 7 days.
def filter(action, policy) {
    return true
}

def initialize(action, policy) {}

def check(action, policy) {
    if proposal.elapsed() >= days(7) {
        return FAILED
    }
    total = len(users)
    yes = len(proposal.get_yes_votes())
    no = len(proposal.get_no_votes())
    if yes * 2 > total {
        return PASSED
    }
    if no * 2 >= total {
        return FAILED
    }
    return PROPOSED
}

def notify(action, policy) {
    notify_users(users, "{initiator} proposes {action_type} ({action}). A majority of all members must vote yes within 7 days.", "boolean")
}

def pass(action, policy) {
    action.execute()
}

def fail(action, policy) {
    notify_users([action.initiator], "Your proposal {action} ({action_type}) did not pass.")
}
"#;

/// Tracks community names so duplicates are refused.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    names: BTreeSet<String>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn with_names(names: impl IntoIterator<Item = String>) -> Self {
        Registry { names: names.into_iter().collect() }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn bootstrap(
        &mut self,
        name: &str,
        members: Vec<User>,
        seed: u64,
        adapter: &AdapterDescriptor,
        at: Timestamp,
    ) -> Result<Community> {
        if self.names.contains(name) {
            return Err(GovError::new(ErrorCode::Conflict, format!("a community named `{name}` already exists")));
        }
        let c = bootstrap_community(name, members, seed, adapter, at)?;
        self.names.insert(name.to_string());
        Ok(c)
    }
}

/// URL-safe community id derived from the name.
pub fn community_slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let trimmed = out.trim_matches('-');
    if trimmed.is_empty() {
        "community".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Creates a community: every member in the base role, VIEW and PROPOSE on
/// every registered action type, the starter constitution policy and one
/// empty document. Pure function of its inputs.
pub fn bootstrap_community(
    name: &str,
    members: Vec<User>,
    seed: u64,
    adapter: &AdapterDescriptor,
    at: Timestamp,
) -> Result<Community> {
    if members.is_empty() {
        return Err(GovError::new(ErrorCode::InvalidInput, "a community needs at least one member"));
    }
    if name.trim().is_empty() {
        return Err(GovError::new(ErrorCode::InvalidInput, "community name must not be empty"));
    }
    let mut action_types = BTreeMap::new();
    for info in catalog::registry_entries().into_iter().chain(adapter.registry_entries()) {
        if action_types.insert(info.name.clone(), info).is_some() {
            return Err(GovError::new(ErrorCode::InvalidInput, "adapter redefines a constitution action type"));
        }
    }

    let mut base = Role::new(BASE_ROLE);
    for t in action_types.keys() {
        base.permissions.insert(Permission::new(t.clone(), PermissionKind::View));
        base.permissions.insert(Permission::new(t.clone(), PermissionKind::Propose));
    }
    let mut users = BTreeMap::new();
    for u in members {
        if !is_url_safe(u.id.as_str()) {
            return Err(GovError::new(ErrorCode::InvalidInput, format!("user id `{}` is not URL-safe", u.id)));
        }
        if users.contains_key(&u.id) {
            return Err(GovError::new(ErrorCode::InvalidInput, format!("duplicate member `{}`", u.id)));
        }
        base.members.insert(u.id.clone());
        users.insert(u.id.clone(), u);
    }
    let mut roles = BTreeMap::new();
    let base_id = base.id.clone();
    roles.insert(base_id.clone(), base);

    let prog = parse_policy_source(STARTER_POLICY_SOURCE).map_err(GovError::from)?;
    let starter = Policy {
        id: PolicyId::from(STARTER_POLICY_ID),
        name: STARTER_POLICY_NAME.to_string(),
        layer: Layer::Constitution,
        source: STARTER_POLICY_SOURCE.to_string(),
        description: prog.description.clone(),
        precedence: 0,
        enacted_at: at,
        enact_seq: 0,
        trial_mode: false,
        data: DataStore::default(),
        stage: None,
    };

    let community = Community {
        id: CommunityId(community_slug(name)),
        name: name.to_string(),
        members: users.keys().cloned().collect(),
        users,
        base_role: base_id,
        roles,
        documents: alloc::vec![Document {
            id: DocumentId::from(STARTER_DOCUMENT_ID),
            title: "Charter".to_string(),
            body: String::new(),
            version: 1,
        }],
        policies: alloc::vec![starter],
        policy_bundles: Vec::new(),
        action_types,
        adapter: adapter.platform.clone(),
        rng_seed: seed,
        config: CommunityConfig::default(),
    };
    community.validate()?;
    Ok(community)
}

/// Applies a constitution change directly, before the community's log
/// starts. Goes through the same validation as a governed change; ids of
/// created policies derive from `label` (a policy added as `jury` is `p-jury`).
pub fn seed_change(c: &mut Community, action_type: &str, label: &str, payload: Json, at: Timestamp) -> Result<()> {
    let Json::Object(payload) = payload else {
        return Err(GovError::new(ErrorCode::InvalidInput, "payload must be an object"));
    };
    let mut seq = c.policies.iter().map(|p| p.enact_seq + 1).max().unwrap_or(1);
    let label = ActionId::from(label);
    let mut ctx = catalog::ExecCtx { action: &label, now: at, next_enact_seq: &mut seq };
    let mut out = catalog::ExecOutput::default();
    catalog::execute(c, action_type, &payload, &mut ctx, &mut out).map(|_| ())
}
