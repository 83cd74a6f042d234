//! A community's engine bound to its on-disk log. Every command's events
//! are durable before the command is acknowledged; a failed write halts
//! the node rather than letting memory and log diverge.

use std::path::{Path, PathBuf};

use govkit_core::engine::{Command, Engine, EngineEvent, EventKind, Reply};
use govkit_core::ids::{ActionId, PolicyId};
use govkit_core::model::Community;
use govkit_core::platform::Platform;
use govkit_core::time::Timestamp;
use govkit_core::{ErrorCode, GovError};
use serde::Serialize;

use crate::store::{self, EventLog, LoadReport};

/// Commands between automatic snapshots.
pub const SNAPSHOT_EVERY: u64 = 500;

pub struct Node {
    dir: PathBuf,
    engine: Engine,
    log: EventLog,
    events: Vec<EngineEvent>,
    halted: Option<String>,
    commands_since_snapshot: u64,
    snapshot_every: u64,
}

impl Node {
    /// Starts a new community log in `dir` with its genesis record.
    pub fn create(dir: &Path, community: Community, platform: Box<dyn Platform>, at: Timestamp) -> Result<Node, GovError> {
        let mut log = EventLog::create(dir)?;
        let mut engine = Engine::genesis(community, platform, at)?;
        let events = engine.take_events();
        log.append(&events)?;
        Ok(Node::assemble(dir, engine, log, events))
    }

    /// Reopens a community: newest valid snapshot, then the rest of the log.
    pub fn open(
        dir: &Path,
        platform: impl Fn(&str) -> Result<Box<dyn Platform>, GovError>,
    ) -> Result<(Node, LoadReport), GovError> {
        let (log, events, report) = EventLog::open(dir)?;
        let adapter = events
            .first()
            .and_then(|g| g.payload["state"]["community"]["adapter"].as_str())
            .ok_or_else(|| GovError::new(ErrorCode::StorageFailure, "log has no genesis record"))?
            .to_string();
        let last = report.valid_through.unwrap_or(0);
        let engine = match store::latest_snapshot(dir, last) {
            Some(snap) => store::replay_from_snapshot(&snap, &events, platform(&adapter)?, None)?,
            None => store::replay(&events, platform(&adapter)?, None)?,
        };
        Ok((Node::assemble(dir, engine, log, events), report))
    }

    fn assemble(dir: &Path, engine: Engine, log: EventLog, events: Vec<EngineEvent>) -> Node {
        Node {
            dir: dir.to_path_buf(),
            engine,
            log,
            events,
            halted: None,
            commands_since_snapshot: 0,
            snapshot_every: SNAPSHOT_EVERY,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Configuration hooks (fetcher, stopwatch, budget) on the engine.
    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn events(&self) -> &[EngineEvent] {
        &self.events
    }

    pub fn set_snapshot_every(&mut self, n: u64) {
        self.snapshot_every = n.max(1);
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    /// Runs a command at `at`, appending its events before returning.
    pub fn apply(&mut self, at: Timestamp, cmd: Command) -> Result<Reply, GovError> {
        if let Some(why) = &self.halted {
            return Err(GovError::new(ErrorCode::Halted, format!("node halted: {why}")));
        }
        let reply = self.engine.apply(at, cmd);
        let events = self.engine.take_events();
        if !events.is_empty() {
            if let Err(e) = self.log.append(&events) {
                self.halted = Some(e.message.clone());
                return Err(GovError::new(ErrorCode::StorageFailure, format!("node halted: {}", e.message)));
            }
            self.events.extend(events);
            self.commands_since_snapshot += 1;
            if self.commands_since_snapshot >= self.snapshot_every {
                self.snapshot()?;
            }
        }
        reply
    }

    /// Applies at the later of `at` and the engine clock, for real-time callers.
    pub fn apply_now(&mut self, at: Timestamp, cmd: Command) -> Result<Reply, GovError> {
        let at = at.max(self.engine.now());
        self.apply(at, cmd)
    }

    pub fn snapshot(&mut self) -> Result<PathBuf, GovError> {
        self.commands_since_snapshot = 0;
        store::write_snapshot(&self.dir, &self.engine.snapshot())
    }

    pub fn flush(&mut self) -> Result<(), GovError> {
        self.log.flush()
    }

    pub fn query_audit(&self, q: &AuditQuery) -> Result<AuditPage, GovError> {
        query_audit(&self.events, q)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuditQuery {
    pub action: Option<ActionId>,
    pub policy: Option<PolicyId>,
    pub kind: Option<EventKind>,
    pub since: Option<Timestamp>,
    pub until: Option<Timestamp>,
    /// Opaque position from a previous page.
    pub cursor: Option<String>,
    pub limit: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditPage {
    pub events: Vec<EngineEvent>,
    pub next_cursor: Option<String>,
}

pub const AUDIT_PAGE_MAX: usize = 1000;

/// Chronological, filtered page of the log. The cursor is the offset to resume at.
pub fn query_audit(events: &[EngineEvent], q: &AuditQuery) -> Result<AuditPage, GovError> {
    let start = match &q.cursor {
        None => 0,
        Some(c) => c
            .strip_prefix("o")
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| GovError::new(ErrorCode::InvalidInput, format!("malformed cursor `{c}`")))?,
    };
    let limit = if q.limit == 0 { 100 } else { q.limit.min(AUDIT_PAGE_MAX) };
    let matches = |e: &EngineEvent| {
        q.action.as_ref().is_none_or(|a| e.action.as_ref() == Some(a))
            && q.policy
                .as_ref()
                .is_none_or(|p| e.policy.as_ref() == Some(p) || e.deciding_policy.as_ref() == Some(p))
            && q.kind.is_none_or(|k| e.kind == k)
            && q.since.is_none_or(|s| e.ts >= s)
            && q.until.is_none_or(|u| e.ts <= u)
    };
    let first = events.partition_point(|e| e.offset < start);
    let mut page = Vec::new();
    let mut next_cursor = None;
    for e in &events[first..] {
        if !matches(e) {
            continue;
        }
        if page.len() == limit {
            next_cursor = Some(format!("o{}", e.offset));
            break;
        }
        page.push(e.clone());
    }
    Ok(AuditPage { events: page, next_cursor })
}
