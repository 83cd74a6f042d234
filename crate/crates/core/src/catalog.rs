//! Built-in constitution action types. Each one transforms the community's
//! governance state and leaves an undo record from which `revert` restores
//! the prior state exactly.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::dsl::parse_policy_source;
use crate::error::{ErrorCode, FieldError, GovError, Result};
use crate::ids::*;
use crate::model::*;
use crate::time::{Span, Timestamp};

pub const POLICY_ADD: &str = "PolicyAdd";
pub const POLICY_EDIT: &str = "PolicyEdit";
pub const POLICY_REMOVE: &str = "PolicyRemove";
pub const POLICY_BUNDLE_ADD: &str = "PolicyBundleAdd";
pub const ROLE_ADD: &str = "RoleAdd";
pub const ROLE_REMOVE: &str = "RoleRemove";
pub const ROLE_GRANT_PERMISSION: &str = "RoleGrantPermission";
pub const ROLE_REVOKE_PERMISSION: &str = "RoleRevokePermission";
pub const ROLE_ADD_MEMBER: &str = "RoleAddMember";
pub const ROLE_REMOVE_MEMBER: &str = "RoleRemoveMember";
pub const DOCUMENT_ADD: &str = "DocumentAdd";
pub const DOCUMENT_EDIT: &str = "DocumentEdit";
pub const DOCUMENT_REMOVE: &str = "DocumentRemove";
pub const COMMUNITY_CONFIG_EDIT: &str = "CommunityConfigEdit";

pub const CONSTITUTION_TYPES: [&str; 14] = [
    POLICY_ADD,
    POLICY_EDIT,
    POLICY_REMOVE,
    POLICY_BUNDLE_ADD,
    ROLE_ADD,
    ROLE_REMOVE,
    ROLE_GRANT_PERMISSION,
    ROLE_REVOKE_PERMISSION,
    ROLE_ADD_MEMBER,
    ROLE_REMOVE_MEMBER,
    DOCUMENT_ADD,
    DOCUMENT_EDIT,
    DOCUMENT_REMOVE,
    COMMUNITY_CONFIG_EDIT,
];

pub fn is_constitution_type(t: &str) -> bool {
    CONSTITUTION_TYPES.contains(&t)
}

/// Inverse of one executed constitution action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "undo", rename_all = "snake_case")]
pub enum Undo {
    PolicyAdded { policy: PolicyId },
    PolicyEdited { prior: Policy },
    PolicyRemoved { index: usize, policy: Policy },
    BundleAdded { bundle: PolicyBundleId },
    RoleAdded { role: RoleId },
    RoleRemoved { role: Role },
    PermissionGranted { role: RoleId, permission: Permission, was_present: bool },
    PermissionRevoked { role: RoleId, permission: Permission, was_present: bool },
    MemberAdded { role: RoleId, user: UserId, was_present: bool },
    MemberRemoved { role: RoleId, user: UserId, was_present: bool },
    DocumentAdded { document: DocumentId },
    DocumentEdited { prior: Document },
    DocumentRemoved { index: usize, document: Document },
    ConfigEdited { prior: CommunityConfig },
}

/// Context for an execution: which action is executing, when, and the
/// enactment counter used to order policies enacted at the same instant.
pub struct ExecCtx<'a> {
    pub action: &'a ActionId,
    pub now: Timestamp,
    pub next_enact_seq: &'a mut u64,
}

/// Side records that live outside governance state.
#[derive(Debug, Default)]
pub struct ExecOutput {
    pub revisions: Vec<DocumentRevision>,
    pub enacted: Vec<PolicyId>,
    pub retired: Vec<PolicyId>,
    pub config_changed: bool,
}

fn schema_err(fields: Vec<FieldError>) -> GovError {
    let msg = fields
        .iter()
        .map(|f| format!("{}: {}", f.field, f.message))
        .collect::<Vec<_>>()
        .join("; ");
    GovError::new(ErrorCode::SchemaViolation, msg).with_fields(fields)
}

fn dependent(msg: impl Into<String>) -> GovError {
    GovError::new(ErrorCode::DependentState, msg)
}

struct Fields<'a> {
    payload: &'a Map<String, Json>,
    errors: Vec<FieldError>,
}

impl<'a> Fields<'a> {
    fn new(payload: &'a Map<String, Json>) -> Self {
        Fields { payload, errors: Vec::new() }
    }

    fn err(&mut self, field: &str, msg: impl Into<String>) {
        self.errors.push(FieldError::new(field, msg));
    }

    fn str(&mut self, field: &str) -> Option<&'a str> {
        match self.payload.get(field) {
            Some(Json::String(s)) if !s.is_empty() => Some(s.as_str()),
            Some(Json::String(_)) => {
                self.err(field, "must not be empty");
                None
            }
            Some(_) => {
                self.err(field, "must be a string");
                None
            }
            None => {
                self.err(field, "is required");
                None
            }
        }
    }

    fn opt_str(&mut self, field: &str) -> Option<&'a str> {
        match self.payload.get(field) {
            None | Some(Json::Null) => None,
            Some(Json::String(s)) => Some(s.as_str()),
            Some(_) => {
                self.err(field, "must be a string");
                None
            }
        }
    }

    fn opt_int(&mut self, field: &str) -> Option<i64> {
        match self.payload.get(field) {
            None | Some(Json::Null) => None,
            Some(v) => match v.as_i64() {
                Some(n) => Some(n),
                None => {
                    self.err(field, "must be an integer");
                    None
                }
            },
        }
    }

    fn opt_object(&mut self, field: &str) -> Option<&'a Map<String, Json>> {
        match self.payload.get(field) {
            None | Some(Json::Null) => None,
            Some(Json::Object(m)) => Some(m),
            Some(_) => {
                self.err(field, "must be an object");
                None
            }
        }
    }

    fn layer(&mut self, field: &str) -> Option<Layer> {
        match self.str(field)? {
            "PLATFORM" => Some(Layer::Platform),
            "CONSTITUTION" => Some(Layer::Constitution),
            other => {
                self.err(field, format!("unknown layer `{other}` (expected PLATFORM or CONSTITUTION)"));
                None
            }
        }
    }

    fn kind(&mut self, field: &str) -> Option<PermissionKind> {
        match self.str(field)? {
            "VIEW" => Some(PermissionKind::View),
            "PROPOSE" => Some(PermissionKind::Propose),
            "EXECUTE" => Some(PermissionKind::Execute),
            other => {
                self.err(field, format!("unknown permission kind `{other}`"));
                None
            }
        }
    }

    fn unknown_fields(&mut self, allowed: &[&str]) {
        let extra: Vec<String> = self
            .payload
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .cloned()
            .collect();
        for k in extra {
            self.err(&k, "unknown field");
        }
    }

    fn policy_source(&mut self, field: &str) -> Option<&'a str> {
        let src = self.str(field)?;
        if let Err(e) = parse_policy_source(src) {
            self.errors.push(e.to_field_error(field));
            return None;
        }
        Some(src)
    }

    fn role<'c>(&mut self, c: &'c Community, field: &str) -> Option<&'c Role> {
        let name = self.str(field)?;
        let r = c.roles.get(&RoleId::from(name));
        if r.is_none() {
            self.err(field, format!("no role named `{name}`"));
        }
        r
    }

    fn member(&mut self, c: &Community, field: &str) -> Option<UserId> {
        let id = UserId::from(self.str(field)?);
        if !c.is_member(&id) {
            self.err(field, format!("`{id}` is not a member"));
            return None;
        }
        Some(id)
    }

    fn action_type(&mut self, c: &Community, field: &str) -> Option<String> {
        let t = self.str(field)?;
        if !c.action_types.contains_key(t) {
            self.err(field, format!("unknown action type `{t}`"));
            return None;
        }
        Some(t.to_string())
    }

    fn policy<'c>(&mut self, c: &'c Community, field: &str) -> Option<&'c Policy> {
        let id = self.str(field)?;
        let p = c.policies.iter().find(|p| p.id.as_str() == id || p.name == id);
        if p.is_none() {
            self.err(field, format!("no policy `{id}`"));
        }
        p
    }

    fn document<'c>(&mut self, c: &'c Community, field: &str) -> Option<&'c Document> {
        let id = DocumentId::from(self.str(field)?);
        let d = c.document(&id);
        if d.is_none() {
            self.err(field, format!("no document `{id}`"));
        }
        d
    }

}

/// Field-level validation of a constitution payload against the current
/// community. Policy sources are parsed so syntax errors carry line/column.
pub fn validate_payload(c: &Community, action_type: &str, payload: &Map<String, Json>) -> Vec<FieldError> {
    let mut f = Fields::new(payload);
    match action_type {
        POLICY_ADD => {
            f.unknown_fields(&["name", "source", "layer", "precedence", "data"]);
            if let Some(name) = f.str("name") {
                if c.policy_by_name(name).is_some() {
                    f.err("name", format!("a policy named `{name}` is already enacted"));
                }
            }
            f.policy_source("source");
            f.layer("layer");
            f.opt_int("precedence");
            data_field(&mut f);
        }
        POLICY_EDIT => {
            f.unknown_fields(&["policy", "source"]);
            f.policy(c, "policy");
            f.policy_source("source");
        }
        POLICY_REMOVE => {
            f.unknown_fields(&["policy"]);
            if let Some(p) = f.policy(c, "policy") {
                if p.stage.is_some() {
                    f.err("policy", "stages of a policy bundle are retired with their bundle");
                }
            }
        }
        POLICY_BUNDLE_ADD => {
            f.unknown_fields(&["name", "layer", "precedence", "stages"]);
            f.str("name");
            f.layer("layer");
            f.opt_int("precedence");
            match payload.get("stages") {
                Some(Json::Array(stages)) if !stages.is_empty() => {
                    let mut names = BTreeSet::new();
                    for (i, s) in stages.iter().enumerate() {
                        let Some(obj) = s.as_object() else {
                            f.err(&format!("stages[{i}]"), "must be an object");
                            continue;
                        };
                        let mut sf = Fields::new(obj);
                        sf.unknown_fields(&["name", "source", "data"]);
                        if let Some(name) = sf.str("name") {
                            if c.policy_by_name(name).is_some() || !names.insert(name.to_string()) {
                                sf.err("name", format!("policy name `{name}` is taken"));
                            }
                        }
                        sf.policy_source("source");
                        data_field(&mut sf);
                        for mut e in sf.errors {
                            e.field = format!("stages[{i}].{}", e.field);
                            f.errors.push(e);
                        }
                    }
                }
                Some(Json::Array(_)) => f.err("stages", "must list at least one stage"),
                Some(_) => f.err("stages", "must be an array"),
                None => f.err("stages", "is required"),
            }
        }
        ROLE_ADD => {
            f.unknown_fields(&["name", "permissions"]);
            if let Some(name) = f.str("name") {
                if c.roles.contains_key(&RoleId::from(name)) {
                    f.err("name", format!("role `{name}` already exists"));
                }
            }
            match payload.get("permissions") {
                None | Some(Json::Null) => {}
                Some(Json::Array(perms)) => {
                    for (i, p) in perms.iter().enumerate() {
                        match p.as_object() {
                            Some(obj) => {
                                let mut pf = Fields::new(obj);
                                pf.action_type(c, "action_type");
                                pf.kind("kind");
                                for mut e in pf.errors {
                                    e.field = format!("permissions[{i}].{}", e.field);
                                    f.errors.push(e);
                                }
                            }
                            None => f.err(&format!("permissions[{i}]"), "must be an object"),
                        }
                    }
                }
                Some(_) => f.err("permissions", "must be an array"),
            }
        }
        ROLE_REMOVE => {
            f.unknown_fields(&["role"]);
            if let Some(r) = f.role(c, "role") {
                if r.id == c.base_role {
                    f.err("role", "the base role cannot be removed");
                }
            }
        }
        ROLE_GRANT_PERMISSION | ROLE_REVOKE_PERMISSION => {
            f.unknown_fields(&["role", "action_type", "kind"]);
            f.role(c, "role");
            f.action_type(c, "action_type");
            f.kind("kind");
        }
        ROLE_ADD_MEMBER | ROLE_REMOVE_MEMBER => {
            f.unknown_fields(&["role", "user"]);
            if let Some(r) = f.role(c, "role") {
                if r.id == c.base_role {
                    f.err("role", "base role membership follows community membership");
                }
            }
            f.member(c, "user");
        }
        DOCUMENT_ADD => {
            f.unknown_fields(&["title", "body"]);
            f.str("title");
            f.opt_str("body");
        }
        DOCUMENT_EDIT => {
            f.unknown_fields(&["document", "title", "body"]);
            f.document(c, "document");
            f.opt_str("title");
            match payload.get("body") {
                Some(Json::String(_)) => {}
                Some(_) => f.err("body", "must be a string"),
                None => f.err("body", "is required"),
            }
        }
        DOCUMENT_REMOVE => {
            f.unknown_fields(&["document"]);
            f.document(c, "document");
        }
        COMMUNITY_CONFIG_EDIT => {
            f.unknown_fields(&["default_disposition", "http_allowlist", "tick_period"]);
            if payload.is_empty() {
                f.err("payload", "at least one setting is required");
            }
            if let Some(d) = f.opt_str("default_disposition") {
                if d != "allow" && d != "deny" {
                    f.err("default_disposition", "must be `allow` or `deny`");
                }
            }
            match payload.get("http_allowlist") {
                None => {}
                Some(Json::Array(xs)) => {
                    for (i, x) in xs.iter().enumerate() {
                        match x.as_str() {
                            Some(u) if u.starts_with("http://") || u.starts_with("https://") => {}
                            _ => f.err(&format!("http_allowlist[{i}]"), "must be an http(s) URL prefix"),
                        }
                    }
                }
                Some(_) => f.err("http_allowlist", "must be an array of URL prefixes"),
            }
            if let Some(p) = f.opt_str("tick_period") {
                match Span::parse(p) {
                    Ok(s) if s.as_millis() > 0 => {}
                    _ => f.err("tick_period", "must be a positive duration such as `60s`"),
                }
            }
        }
        other => f.err("action_type", format!("`{other}` is not a constitution action")),
    }
    f.errors
}

fn data_field(f: &mut Fields<'_>) {
    if let Some(obj) = f.opt_object("data") {
        if DataStore::from_json_object(obj.clone()).is_err() {
            f.err("data", "exceeds the 64 KiB data store cap");
        }
    }
}

fn str_field<'p>(p: &'p Map<String, Json>, k: &str) -> &'p str {
    p.get(k).and_then(Json::as_str).unwrap_or_default()
}

fn layer_of(p: &Map<String, Json>) -> Layer {
    if str_field(p, "layer") == "CONSTITUTION" {
        Layer::Constitution
    } else {
        Layer::Platform
    }
}

fn kind_of(p: &Map<String, Json>) -> PermissionKind {
    match str_field(p, "kind") {
        "VIEW" => PermissionKind::View,
        "EXECUTE" => PermissionKind::Execute,
        _ => PermissionKind::Propose,
    }
}

fn data_of(p: &Map<String, Json>) -> DataStore {
    p.get("data")
        .and_then(Json::as_object)
        .and_then(|m| DataStore::from_json_object(m.clone()).ok())
        .unwrap_or_default()
}

fn new_policy(
    id: PolicyId,
    name: &str,
    layer: Layer,
    source: &str,
    precedence: i64,
    data: DataStore,
    ctx: &mut ExecCtx<'_>,
) -> Result<Policy> {
    let prog = parse_policy_source(source)?;
    let seq = *ctx.next_enact_seq;
    *ctx.next_enact_seq += 1;
    Ok(Policy {
        id,
        name: name.to_string(),
        layer,
        source: source.to_string(),
        description: prog.description.clone(),
        precedence,
        enacted_at: ctx.now,
        enact_seq: seq,
        trial_mode: prog.is_trial(),
        data,
        stage: None,
    })
}

fn find_policy_index(c: &Community, key: &str) -> Option<usize> {
    c.policies.iter().position(|p| p.id.as_str() == key || p.name == key)
}

/// At least one member must keep PROPOSE on every constitution action type,
/// otherwise the community could never amend that part of its rules again.
pub fn check_lockout(c: &Community) -> Result<()> {
    for t in CONSTITUTION_TYPES {
        let wanted = Permission::new(t, PermissionKind::Propose);
        let held = c
            .roles
            .values()
            .any(|r| r.permissions.contains(&wanted) && r.members.iter().any(|m| c.is_member(m)));
        if !held {
            return Err(GovError::new(
                ErrorCode::GovernanceLockout,
                format!("no member would retain PROPOSE on {t}"),
            ));
        }
    }
    Ok(())
}

/// Executes a constitution action against `c`. On error `c` is unchanged.
pub fn execute(
    c: &mut Community,
    action_type: &str,
    payload: &Map<String, Json>,
    ctx: &mut ExecCtx<'_>,
    out: &mut ExecOutput,
) -> Result<Undo> {
    let errors = validate_payload(c, action_type, payload);
    if !errors.is_empty() {
        return Err(schema_err(errors));
    }
    let p = payload;
    let undo = match action_type {
        POLICY_ADD => {
            let id = PolicyId(format!("p-{}", ctx.action));
            let policy = new_policy(
                id.clone(),
                str_field(p, "name"),
                layer_of(p),
                str_field(p, "source"),
                p.get("precedence").and_then(Json::as_i64).unwrap_or(0),
                data_of(p),
                ctx,
            )?;
            c.policies.push(policy);
            out.enacted.push(id.clone());
            Undo::PolicyAdded { policy: id }
        }
        POLICY_EDIT => {
            let idx = find_policy_index(c, str_field(p, "policy")).unwrap_or_default();
            let source = str_field(p, "source");
            let prog = parse_policy_source(source)?;
            let prior = c.policies[idx].clone();
            let pol = &mut c.policies[idx];
            pol.source = source.to_string();
            pol.description = prog.description.clone();
            pol.trial_mode = prog.is_trial();
            out.enacted.push(pol.id.clone());
            Undo::PolicyEdited { prior }
        }
        POLICY_REMOVE => {
            let idx = find_policy_index(c, str_field(p, "policy")).unwrap_or_default();
            if c.policies[idx].layer == Layer::Constitution && c.constitution_policy_count() == 1 {
                return Err(GovError::new(
                    ErrorCode::LastConstitutionPolicy,
                    "refusing to remove the last constitution policy",
                ));
            }
            let policy = c.policies.remove(idx);
            out.retired.push(policy.id.clone());
            Undo::PolicyRemoved { index: idx, policy }
        }
        POLICY_BUNDLE_ADD => {
            let bundle_id = PolicyBundleId(format!("b-{}", ctx.action));
            let layer = layer_of(p);
            let precedence = p.get("precedence").and_then(Json::as_i64).unwrap_or(0);
            let stages = p.get("stages").and_then(Json::as_array).cloned().unwrap_or_default();
            let mut policies = Vec::with_capacity(stages.len());
            for (i, s) in stages.iter().enumerate() {
                let s = s.as_object().cloned().unwrap_or_default();
                let mut pol = new_policy(
                    PolicyId(format!("p-{}-{}", ctx.action, i + 1)),
                    str_field(&s, "name"),
                    layer,
                    str_field(&s, "source"),
                    precedence,
                    data_of(&s),
                    ctx,
                )?;
                pol.stage = Some(StageRef { bundle: bundle_id.clone(), index: i });
                policies.push(pol);
            }
            let ids: Vec<PolicyId> = policies.iter().map(|p| p.id.clone()).collect();
            out.enacted.extend(ids.iter().cloned());
            c.policies.extend(policies);
            c.policy_bundles.push(PolicyBundle {
                id: bundle_id.clone(),
                name: str_field(p, "name").to_string(),
                stages: ids,
            });
            Undo::BundleAdded { bundle: bundle_id }
        }
        ROLE_ADD => {
            let name = str_field(p, "name");
            let mut role = Role::new(name);
            if let Some(perms) = p.get("permissions").and_then(Json::as_array) {
                for perm in perms.iter().filter_map(Json::as_object) {
                    role.permissions.insert(Permission::new(str_field(perm, "action_type"), kind_of(perm)));
                }
            }
            let id = role.id.clone();
            c.roles.insert(id.clone(), role);
            Undo::RoleAdded { role: id }
        }
        ROLE_REMOVE => {
            let id = RoleId::from(str_field(p, "role"));
            let role = c.roles.remove(&id).ok_or_else(|| dependent("role vanished"))?;
            if let Err(e) = check_lockout(c) {
                c.roles.insert(id, role);
                return Err(e);
            }
            Undo::RoleRemoved { role }
        }
        ROLE_GRANT_PERMISSION => {
            let id = RoleId::from(str_field(p, "role"));
            let perm = Permission::new(str_field(p, "action_type"), kind_of(p));
            let role = c.roles.get_mut(&id).ok_or_else(|| dependent("role vanished"))?;
            let was_present = !role.permissions.insert(perm.clone());
            Undo::PermissionGranted { role: id, permission: perm, was_present }
        }
        ROLE_REVOKE_PERMISSION => {
            let id = RoleId::from(str_field(p, "role"));
            let perm = Permission::new(str_field(p, "action_type"), kind_of(p));
            let role = c.roles.get_mut(&id).ok_or_else(|| dependent("role vanished"))?;
            let was_present = role.permissions.remove(&perm);
            if let Err(e) = check_lockout(c) {
                if was_present {
                    c.roles.get_mut(&id).map(|r| r.permissions.insert(perm));
                }
                return Err(e);
            }
            Undo::PermissionRevoked { role: id, permission: perm, was_present }
        }
        ROLE_ADD_MEMBER => {
            let id = RoleId::from(str_field(p, "role"));
            let user = UserId::from(str_field(p, "user"));
            let role = c.roles.get_mut(&id).ok_or_else(|| dependent("role vanished"))?;
            let was_present = !role.members.insert(user.clone());
            Undo::MemberAdded { role: id, user, was_present }
        }
        ROLE_REMOVE_MEMBER => {
            let id = RoleId::from(str_field(p, "role"));
            let user = UserId::from(str_field(p, "user"));
            let role = c.roles.get_mut(&id).ok_or_else(|| dependent("role vanished"))?;
            let was_present = role.members.remove(&user);
            if let Err(e) = check_lockout(c) {
                if was_present {
                    c.roles.get_mut(&id).map(|r| r.members.insert(user));
                }
                return Err(e);
            }
            Undo::MemberRemoved { role: id, user, was_present }
        }
        DOCUMENT_ADD => {
            let id = DocumentId(format!("d-{}", ctx.action));
            let doc = Document {
                id: id.clone(),
                title: str_field(p, "title").to_string(),
                body: str_field(p, "body").to_string(),
                version: 1,
            };
            out.revisions.push(revision(&doc, Some(ctx.action), false, ctx.now));
            c.documents.push(doc);
            Undo::DocumentAdded { document: id }
        }
        DOCUMENT_EDIT => {
            let id = DocumentId::from(str_field(p, "document"));
            let doc = c
                .documents
                .iter_mut()
                .find(|d| d.id == id)
                .ok_or_else(|| dependent("document vanished"))?;
            let prior = doc.clone();
            doc.body = str_field(p, "body").to_string();
            if let Some(t) = p.get("title").and_then(Json::as_str) {
                doc.title = t.to_string();
            }
            doc.version += 1;
            out.revisions.push(revision(doc, Some(ctx.action), false, ctx.now));
            Undo::DocumentEdited { prior }
        }
        DOCUMENT_REMOVE => {
            let id = DocumentId::from(str_field(p, "document"));
            let index = c
                .documents
                .iter()
                .position(|d| d.id == id)
                .ok_or_else(|| dependent("document vanished"))?;
            let document = c.documents.remove(index);
            Undo::DocumentRemoved { index, document }
        }
        COMMUNITY_CONFIG_EDIT => {
            let prior = c.config.clone();
            if let Some(d) = p.get("default_disposition").and_then(Json::as_str) {
                c.config.default_disposition =
                    if d == "deny" { DefaultDisposition::Deny } else { DefaultDisposition::Allow };
            }
            if let Some(xs) = p.get("http_allowlist").and_then(Json::as_array) {
                c.config.http_allowlist = xs.iter().filter_map(Json::as_str).map(ToString::to_string).collect();
            }
            if let Some(t) = p.get("tick_period").and_then(Json::as_str) {
                c.config.tick_period = Span::parse(t).map_err(|e| GovError::new(ErrorCode::SchemaViolation, e))?;
            }
            out.config_changed = true;
            Undo::ConfigEdited { prior }
        }
        other => {
            return Err(GovError::new(
                ErrorCode::UnknownActionType,
                format!("`{other}` is not a constitution action"),
            ))
        }
    };
    Ok(undo)
}

fn revision(doc: &Document, action: Option<&ActionId>, reverted: bool, at: Timestamp) -> DocumentRevision {
    DocumentRevision {
        document: doc.id.clone(),
        version: doc.version,
        title: doc.title.clone(),
        body: doc.body.clone(),
        action: action.cloned(),
        reverted,
        at,
    }
}

/// Applies the inverse recorded in `undo`. On error `c` is unchanged.
pub fn revert(
    c: &mut Community,
    undo: &Undo,
    action: &ActionId,
    now: Timestamp,
    out: &mut ExecOutput,
) -> Result<()> {
    match undo {
        Undo::PolicyAdded { policy } => {
            let idx = c
                .policies
                .iter()
                .position(|p| &p.id == policy)
                .ok_or_else(|| dependent(format!("policy {policy} is no longer enacted")))?;
            if c.policies[idx].layer == Layer::Constitution && c.constitution_policy_count() == 1 {
                return Err(GovError::new(
                    ErrorCode::LastConstitutionPolicy,
                    "refusing to retire the last constitution policy",
                ));
            }
            c.policies.remove(idx);
            out.retired.push(policy.clone());
        }
        Undo::PolicyEdited { prior } => {
            let pol = c
                .policies
                .iter_mut()
                .find(|p| p.id == prior.id)
                .ok_or_else(|| dependent(format!("policy {} is no longer enacted", prior.id)))?;
            pol.source = prior.source.clone();
            pol.description = prior.description.clone();
            pol.trial_mode = prior.trial_mode;
            out.enacted.push(prior.id.clone());
        }
        Undo::PolicyRemoved { index, policy } => {
            if c.policy_by_name(&policy.name).is_some() {
                return Err(dependent(format!("a policy named `{}` has since been enacted", policy.name)));
            }
            let at = (*index).min(c.policies.len());
            c.policies.insert(at, policy.clone());
            out.enacted.push(policy.id.clone());
        }
        Undo::BundleAdded { bundle } => {
            let pos = c
                .policy_bundles
                .iter()
                .position(|b| &b.id == bundle)
                .ok_or_else(|| dependent(format!("policy bundle {bundle} is gone")))?;
            let stages: BTreeSet<PolicyId> = c.policy_bundles[pos].stages.iter().cloned().collect();
            if stages.iter().any(|s| c.policy(s).is_none()) {
                return Err(dependent(format!("policy bundle {bundle} was partially retired")));
            }
            let remaining_constitution = c
                .policies
                .iter()
                .filter(|p| p.layer == Layer::Constitution && !stages.contains(&p.id))
                .count();
            if remaining_constitution == 0 {
                return Err(GovError::new(
                    ErrorCode::LastConstitutionPolicy,
                    "retiring this bundle would leave no constitution policy",
                ));
            }
            c.policies.retain(|p| !stages.contains(&p.id));
            c.policy_bundles.remove(pos);
            out.retired.extend(stages);
        }
        Undo::RoleAdded { role } => {
            let literal_users: Vec<&str> = c
                .policies
                .iter()
                .filter(|p| source_mentions(&p.source, role.as_str()))
                .map(|p| p.name.as_str())
                .collect();
            if !literal_users.is_empty() {
                return Err(dependent(format!(
                    "role `{role}` is referenced by enacted policy {}",
                    literal_users.join(", ")
                )));
            }
            if c.roles.remove(role).is_none() {
                return Err(dependent(format!("role `{role}` no longer exists")));
            }
        }
        Undo::RoleRemoved { role } => {
            if c.roles.contains_key(&role.id) {
                return Err(dependent(format!("a role named `{}` exists again", role.name)));
            }
            c.roles.insert(role.id.clone(), role.clone());
        }
        Undo::PermissionGranted { role, permission, was_present } => {
            let r = c.roles.get_mut(role).ok_or_else(|| dependent(format!("role `{role}` no longer exists")))?;
            if !was_present {
                r.permissions.remove(permission);
                if let Err(e) = check_lockout(c) {
                    c.roles.get_mut(role).map(|r| r.permissions.insert(permission.clone()));
                    return Err(e);
                }
            }
        }
        Undo::PermissionRevoked { role, permission, was_present } => {
            let r = c.roles.get_mut(role).ok_or_else(|| dependent(format!("role `{role}` no longer exists")))?;
            if *was_present {
                r.permissions.insert(permission.clone());
            }
        }
        Undo::MemberAdded { role, user, was_present } => {
            let r = c.roles.get_mut(role).ok_or_else(|| dependent(format!("role `{role}` no longer exists")))?;
            if !was_present {
                r.members.remove(user);
                if let Err(e) = check_lockout(c) {
                    c.roles.get_mut(role).map(|r| r.members.insert(user.clone()));
                    return Err(e);
                }
            }
        }
        Undo::MemberRemoved { role, user, was_present } => {
            let r = c.roles.get_mut(role).ok_or_else(|| dependent(format!("role `{role}` no longer exists")))?;
            if *was_present {
                r.members.insert(user.clone());
            }
        }
        Undo::DocumentAdded { document } => {
            let idx = c
                .documents
                .iter()
                .position(|d| &d.id == document)
                .ok_or_else(|| dependent(format!("document {document} is gone")))?;
            if c.documents[idx].version != 1 {
                return Err(dependent(format!("document {document} has been edited since")));
            }
            let doc = c.documents.remove(idx);
            out.revisions.push(revision(&doc, Some(action), true, now));
        }
        Undo::DocumentEdited { prior } => {
            let doc = c
                .documents
                .iter_mut()
                .find(|d| d.id == prior.id)
                .ok_or_else(|| dependent(format!("document {} is gone", prior.id)))?;
            if doc.version != prior.version + 1 {
                return Err(dependent(format!("document {} has been edited since", prior.id)));
            }
            *doc = prior.clone();
            out.revisions.push(revision(prior, Some(action), true, now));
        }
        Undo::DocumentRemoved { index, document } => {
            if c.document(&document.id).is_some() {
                return Err(dependent(format!("document {} exists again", document.id)));
            }
            let at = (*index).min(c.documents.len());
            c.documents.insert(at, document.clone());
        }
        Undo::ConfigEdited { prior } => {
            c.config = prior.clone();
            out.config_changed = true;
        }
    }
    Ok(())
}

/// True when `source` contains `needle` as a whole string literal.
fn source_mentions(source: &str, needle: &str) -> bool {
    match parse_policy_source(source) {
        Ok(prog) => prog.string_literals().contains(needle),
        Err(_) => source.contains(&format!("\"{needle}\"")),
    }
}

/// Published JSON Schema for each constitution payload, for form generation.
pub fn payload_schema(action_type: &str) -> Option<Json> {
    let string = json!({"type": "string", "minLength": 1});
    let layer = json!({"enum": ["PLATFORM", "CONSTITUTION"]});
    let kind = json!({"enum": ["VIEW", "PROPOSE", "EXECUTE"]});
    let obj = |props: Json, required: &[&str]| {
        json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "title": action_type,
            "type": "object",
            "properties": props,
            "required": required,
            "additionalProperties": false,
        })
    };
    Some(match action_type {
        POLICY_ADD => obj(
            json!({"name": string, "source": {"type": "string", "contentMediaType": "text/x-govkit-policy"},
                   "layer": layer, "precedence": {"type": "integer"}, "data": {"type": "object"}}),
            &["name", "source", "layer"],
        ),
        POLICY_EDIT => obj(json!({"policy": string, "source": {"type": "string"}}), &["policy", "source"]),
        POLICY_REMOVE => obj(json!({"policy": string}), &["policy"]),
        POLICY_BUNDLE_ADD => obj(
            json!({"name": string, "layer": layer, "precedence": {"type": "integer"},
                   "stages": {"type": "array", "minItems": 1, "items": {
                       "type": "object",
                       "properties": {"name": string, "source": {"type": "string"}, "data": {"type": "object"}},
                       "required": ["name", "source"]}}}),
            &["name", "layer", "stages"],
        ),
        ROLE_ADD => obj(
            json!({"name": string, "permissions": {"type": "array", "items": {
                "type": "object",
                "properties": {"action_type": string, "kind": kind},
                "required": ["action_type", "kind"]}}}),
            &["name"],
        ),
        ROLE_REMOVE => obj(json!({"role": string}), &["role"]),
        ROLE_GRANT_PERMISSION | ROLE_REVOKE_PERMISSION => obj(
            json!({"role": string, "action_type": string, "kind": kind}),
            &["role", "action_type", "kind"],
        ),
        ROLE_ADD_MEMBER | ROLE_REMOVE_MEMBER => obj(json!({"role": string, "user": string}), &["role", "user"]),
        DOCUMENT_ADD => obj(json!({"title": string, "body": {"type": "string"}}), &["title"]),
        DOCUMENT_EDIT => obj(
            json!({"document": string, "title": string, "body": {"type": "string"}}),
            &["document", "body"],
        ),
        DOCUMENT_REMOVE => obj(json!({"document": string}), &["document"]),
        COMMUNITY_CONFIG_EDIT => obj(
            json!({"default_disposition": {"enum": ["allow", "deny"]},
                   "http_allowlist": {"type": "array", "items": {"type": "string", "pattern": "^https?://"}},
                   "tick_period": {"type": "string", "pattern": "^([0-9]+(ms|d|h|m|s))+$"}}),
            &[],
        ),
        _ => return None,
    })
}

pub fn undo_to_json(u: &Undo) -> Json {
    serde_json::to_value(u).unwrap_or(Json::Null)
}

pub fn undo_from_json(j: &Json) -> Result<Undo> {
    serde_json::from_value(j.clone())
        .map_err(|e| GovError::new(ErrorCode::NoUndoRecord, format!("undo record unreadable: {e}")))
}

/// Registered constitution types, for the community's action-type registry.
pub fn registry_entries() -> Vec<ActionTypeInfo> {
    CONSTITUTION_TYPES
        .iter()
        .map(|t| ActionTypeInfo { name: t.to_string(), layer: Layer::Constitution })
        .collect()
}
