//! On-disk layout of a deployment:
//!
//! ```text
//! <data>/tokens.json                    hashed bearer tokens
//! <data>/communities/<slug>/events.jsonl
//! <data>/communities/<slug>/snap-*.json
//! <data>/communities/<slug>/adapter.json  webhook settings, absent for sandbox
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use govkit_core::bootstrap::{bootstrap_community, community_slug};
use govkit_core::ids::{CommunityId, UserId};
use govkit_core::model::{DataStore, User};
use govkit_core::platform::{sandbox_descriptor, Channel, Platform, SandboxPlatform, SandboxState};
use govkit_core::time::Timestamp;
use govkit_core::{ErrorCode, GovError};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::node::Node;
use crate::store::sha256_hex;
use crate::webhook::{self, WebhookConfig, WebhookPlatform};

pub const TOKENS_FILE: &str = "tokens.json";
pub const ADAPTER_FILE: &str = "adapter.json";
const COMMUNITIES: &str = "communities";

fn io_err(what: &str, e: impl std::fmt::Display) -> GovError {
    GovError::new(ErrorCode::StorageFailure, format!("{what}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Member,
    Adapter,
    AdminInstall,
}

/// A provisioned token. Only the SHA-256 of the secret is stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community: Option<CommunityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<UserId>,
    pub scopes: Vec<Scope>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStore {
    pub tokens: Vec<TokenRecord>,
}

impl TokenStore {
    pub fn find(&self, secret: &str) -> Option<&TokenRecord> {
        let h = sha256_hex(secret.as_bytes());
        self.tokens.iter().find(|t| t.hash == h)
    }

    /// Creates a token and returns its secret; the secret is not kept.
    pub fn issue(&mut self, community: Option<CommunityId>, user: Option<UserId>, scopes: Vec<Scope>) -> String {
        let mut bytes = [0u8; 24];
        rand::thread_rng().fill_bytes(&mut bytes);
        let secret = format!("gk_{}", hex::encode(bytes));
        self.tokens.push(TokenRecord { hash: sha256_hex(secret.as_bytes()), community, user, scopes });
        secret
    }
}

/// Secrets handed out when a community is created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IssuedTokens {
    pub community: CommunityId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admin: Option<String>,
    pub members: Vec<(UserId, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

/// A member entry in a members file or a community-creation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEntry {
    pub id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub handle: Option<String>,
    #[serde(default)]
    pub attributes: Map<String, Json>,
}

impl MemberEntry {
    pub fn to_user(&self) -> Result<User, GovError> {
        let mut u = User::new(self.id.clone());
        if let Some(d) = &self.display_name {
            u.display_name = d.clone();
        }
        if let Some(h) = &self.handle {
            u.platform_handle = h.clone();
        }
        u.attributes = DataStore::from_json_object(self.attributes.clone())?;
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunitySpec {
    pub name: String,
    pub members: Vec<MemberEntry>,
    #[serde(default)]
    pub seed: u64,
    /// Webhook settings; the sandbox platform when absent.
    #[serde(default)]
    pub adapter: Option<WebhookConfig>,
    /// Channels created on the sandbox; `general` with everyone when empty.
    #[serde(default)]
    pub channels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> DataDir {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn community_dir(&self, slug: &str) -> PathBuf {
        self.root.join(COMMUNITIES).join(slug)
    }

    /// Slugs of existing communities, sorted.
    pub fn communities(&self) -> Result<Vec<String>, GovError> {
        let dir = self.root.join(COMMUNITIES);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| io_err("listing communities", e))? {
            let e = e.map_err(|e| io_err("listing communities", e))?;
            if e.path().join(crate::store::LOG_FILE).exists() {
                out.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn is_initialized(&self) -> bool {
        self.root.join(TOKENS_FILE).exists()
    }

    pub fn load_tokens(&self) -> Result<TokenStore, GovError> {
        let p = self.root.join(TOKENS_FILE);
        if !p.exists() {
            return Ok(TokenStore::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| io_err("reading tokens", e))?;
        serde_json::from_str(&text).map_err(|e| io_err("parsing tokens", e))
    }

    /// Atomic replace.
    pub fn save_tokens(&self, t: &TokenStore) -> Result<(), GovError> {
        let p = self.root.join(TOKENS_FILE);
        let tmp = self.root.join(".tokens.json.tmp");
        let body = serde_json::to_vec_pretty(t).expect("tokens serialize");
        fs::write(&tmp, body).map_err(|e| io_err("writing tokens", e))?;
        fs::rename(&tmp, &p).map_err(|e| io_err("writing tokens", e))
    }

    /// First-time setup: refuses a directory that already has content.
    /// Issues an admin token in addition to the community's own tokens.
    pub fn init(&self, spec: &CommunitySpec, at: Timestamp) -> Result<(Node, IssuedTokens), GovError> {
        if self.root.exists() {
            let mut entries = fs::read_dir(&self.root).map_err(|e| io_err("reading data directory", e))?;
            if entries.next().is_some() {
                return Err(GovError::new(
                    ErrorCode::Conflict,
                    format!("{} is not empty; refusing to initialize", self.root.display()),
                ));
            }
        }
        fs::create_dir_all(&self.root).map_err(|e| io_err("creating data directory", e))?;
        let mut tokens = TokenStore::default();
        let admin = tokens.issue(None, None, vec![Scope::AdminInstall]);
        let (node, mut issued) = self.create_community_with(spec, at, &mut tokens)?;
        self.save_tokens(&tokens)?;
        issued.admin = Some(admin);
        Ok((node, issued))
    }

    /// Adds a community to an initialized directory.
    pub fn create_community(&self, spec: &CommunitySpec, at: Timestamp) -> Result<(Node, IssuedTokens), GovError> {
        let mut tokens = self.load_tokens()?;
        let out = self.create_community_with(spec, at, &mut tokens)?;
        self.save_tokens(&tokens)?;
        Ok(out)
    }

    fn create_community_with(
        &self,
        spec: &CommunitySpec,
        at: Timestamp,
        tokens: &mut TokenStore,
    ) -> Result<(Node, IssuedTokens), GovError> {
        let existing = self.communities()?;
        let slug = community_slug(&spec.name);
        if existing.contains(&slug) {
            return Err(GovError::new(ErrorCode::Conflict, format!("a community `{slug}` already exists")));
        }
        let users = spec.members.iter().map(MemberEntry::to_user).collect::<Result<Vec<_>, _>>()?;
        let (descriptor, platform): (_, Box<dyn Platform>) = match &spec.adapter {
            Some(cfg) => (webhook::descriptor(cfg), Box::new(WebhookPlatform::new(cfg.clone()))),
            None => (sandbox_descriptor(), Box::new(SandboxPlatform::default())),
        };
        let community = bootstrap_community(&spec.name, users, spec.seed, &descriptor, at)?;
        let platform: Box<dyn Platform> = match &spec.adapter {
            Some(_) => platform,
            None => Box::new(sandbox_for(&community, &spec.channels)),
        };
        let dir = self.community_dir(&slug);
        if let Some(cfg) = &spec.adapter {
            fs::create_dir_all(&dir).map_err(|e| io_err("creating community directory", e))?;
            let body = serde_json::to_vec_pretty(cfg).expect("config serializes");
            fs::write(dir.join(ADAPTER_FILE), body).map_err(|e| io_err("writing adapter config", e))?;
        }
        let id = community.id.clone();
        let members: Vec<UserId> = community.members.iter().cloned().collect();
        let node = Node::create(&dir, community, platform, at)?;
        let mut issued = IssuedTokens { community: id.clone(), admin: None, members: Vec::new(), adapter: None };
        for m in members {
            let secret = tokens.issue(Some(id.clone()), Some(m.clone()), vec![Scope::Member]);
            issued.members.push((m, secret));
        }
        issued.adapter = Some(tokens.issue(Some(id), None, vec![Scope::Adapter]));
        Ok((node, issued))
    }

    pub fn adapter_config(&self, slug: &str) -> Result<Option<WebhookConfig>, GovError> {
        let p = self.community_dir(slug).join(ADAPTER_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| io_err("reading adapter config", e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| io_err("parsing adapter config", e))
    }

    pub fn open_community(&self, slug: &str) -> Result<Node, GovError> {
        let cfg = self.adapter_config(slug)?;
        let (node, report) = Node::open(&self.community_dir(slug), |adapter| -> Result<Box<dyn Platform>, GovError> {
            match (&cfg, adapter) {
                (None, "sandbox") => Ok(Box::new(SandboxPlatform::default())),
                (Some(c), a) if c.platform == a => Ok(Box::new(WebhookPlatform::new(c.clone()))),
                _ => Err(GovError::new(ErrorCode::StorageFailure, format!("no configuration for adapter `{adapter}`"))),
            }
        })?;
        if let Some(why) = report.stopped {
            eprintln!("community {slug}: log truncated at a torn record ({why})");
        }
        Ok(node)
    }
}

/// Sandbox with the given channels (or `general`), every member in each.
pub fn sandbox_for(c: &govkit_core::model::Community, channels: &[String]) -> SandboxPlatform {
    let mut st = SandboxState::default();
    let handles: Vec<String> = c.users.values().map(|u| u.platform_handle.clone()).collect();
    let names = if channels.is_empty() { vec!["general".to_string()] } else { channels.to_vec() };
    for n in names {
        st.channels.insert(n, Channel { members: handles.clone(), ..Channel::default() });
    }
    st.handles = c.users.iter().map(|(k, u)| (k.clone(), u.platform_handle.clone())).collect();
    SandboxPlatform::new(st)
}
