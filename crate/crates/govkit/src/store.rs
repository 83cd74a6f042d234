//! Append-only, hash-chained event log (`events.jsonl`) and state snapshots
//! (`snap-<offset>.json`), plus replay.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use govkit_core::engine::{Command, Engine, EngineEvent, EngineSnapshot, EventKind};
use govkit_core::platform::Platform;
use govkit_core::{ErrorCode, GovError};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

pub const LOG_FILE: &str = "events.jsonl";
pub const FORMAT_VERSION: u32 = 1;
const GENESIS_PREV: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// One line of `events.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub v: u32,
    /// Hash of the preceding record; all zeros for the genesis record.
    pub prev: String,
    pub hash: String,
    pub event: EngineEvent,
}

fn storage(msg: impl Into<String>) -> GovError {
    GovError::new(ErrorCode::StorageFailure, msg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `sha256(prev ‖ canonical event JSON)`. serde_json orders object keys, so
/// the encoding is canonical.
pub fn chain_hash(prev: &str, event: &EngineEvent) -> String {
    let body = serde_json::to_vec(event).expect("events serialize");
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(&body);
    hex::encode(h.finalize())
}

/// What reading a log found.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub records: usize,
    /// Offset of the last record that parsed and chained correctly.
    pub valid_through: Option<u64>,
    /// Why reading stopped early, if it did.
    pub stopped: Option<String>,
    /// Byte length of the valid prefix.
    #[serde(skip)]
    pub valid_bytes: u64,
    #[serde(skip)]
    pub last_hash: String,
}

/// Reads the valid prefix of a log. A bad record stops the read; it is not an error.
pub fn read_log(path: &Path) -> Result<(Vec<EngineEvent>, LoadReport), GovError> {
    let file = File::open(path).map_err(|e| storage(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut report = LoadReport { last_hash: GENESIS_PREV.to_string(), ..LoadReport::default() };
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| storage(e.to_string()))?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            report.stopped = Some(format!("truncated record after offset {:?}", report.valid_through));
            break;
        }
        let rec: Record = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(e) => {
                report.stopped = Some(format!("unreadable record after offset {:?}: {e}", report.valid_through));
                break;
            }
        };
        let expected_offset = report.valid_through.map_or(0, |o| o + 1);
        if rec.v != FORMAT_VERSION {
            report.stopped = Some(format!("record {} has unsupported version {}", rec.event.offset, rec.v));
            break;
        }
        if rec.event.offset != expected_offset {
            report.stopped = Some(format!("offset {} where {expected_offset} was expected", rec.event.offset));
            break;
        }
        if rec.prev != report.last_hash || chain_hash(&rec.prev, &rec.event) != rec.hash {
            report.stopped = Some(format!("hash chain broken at offset {}", rec.event.offset));
            break;
        }
        report.last_hash = rec.hash;
        report.valid_through = Some(rec.event.offset);
        report.valid_bytes += n as u64;
        report.records += 1;
        events.push(rec.event);
    }
    Ok((events, report))
}

/// Writer side of `events.jsonl`.
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_hash: String,
    next_offset: u64,
    sync: bool,
    fail_writes: bool,
}

impl EventLog {
    /// Starts a new log in `dir`; refuses to overwrite an existing one.
    pub fn create(dir: &Path) -> Result<EventLog, GovError> {
        fs::create_dir_all(dir).map_err(|e| storage(e.to_string()))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| storage(format!("cannot create {}: {e}", path.display())))?;
        Ok(EventLog { path, file, last_hash: GENESIS_PREV.into(), next_offset: 0, sync: true, fail_writes: false })
    }

    /// Opens an existing log for appending. A torn final record (a crash
    /// mid-write) is cut off; any other damage is refused.
    pub fn open(dir: &Path) -> Result<(EventLog, Vec<EngineEvent>, LoadReport), GovError> {
        let path = dir.join(LOG_FILE);
        let (events, report) = read_log(&path)?;
        if let Some(why) = &report.stopped {
            if !why.starts_with("truncated") {
                return Err(storage(format!("{}: {why}", path.display())));
            }
        }
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| storage(e.to_string()))?;
        file.set_len(report.valid_bytes).map_err(|e| storage(e.to_string()))?;
        let log = EventLog {
            path,
            file,
            last_hash: report.last_hash.clone(),
            next_offset: report.valid_through.map_or(0, |o| o + 1),
            sync: true,
            fail_writes: false,
        };
        Ok((log, events, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Whether each append is fsynced before returning (the default).
    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    /// Makes every later append fail, as a full disk would. For fault-injection tests.
    pub fn inject_write_failure(&mut self) {
        self.fail_writes = true;
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn last_hash(&self) -> &str {
        &self.last_hash
    }

    /// Appends events as one write. Offsets must continue the log densely.
    pub fn append(&mut self, events: &[EngineEvent]) -> Result<(), GovError> {
        if self.fail_writes {
            return Err(storage("injected write failure"));
        }
        let mut buf = Vec::new();
        let mut prev = self.last_hash.clone();
        let mut offset = self.next_offset;
        for e in events {
            if e.offset != offset {
                return Err(storage(format!("event offset {} does not continue the log at {offset}", e.offset)));
            }
            let hash = chain_hash(&prev, e);
            let rec = Record { v: FORMAT_VERSION, prev: prev.clone(), hash: hash.clone(), event: e.clone() };
            serde_json::to_writer(&mut buf, &rec).map_err(|e| storage(e.to_string()))?;
            buf.push(b'\n');
            prev = hash;
            offset += 1;
        }
        self.file.write_all(&buf).map_err(|e| storage(e.to_string()))?;
        if self.sync {
            self.file.sync_data().map_err(|e| storage(e.to_string()))?;
        }
        self.last_hash = prev;
        self.next_offset = offset;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), GovError> {
        self.file.sync_all().map_err(|e| storage(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub v: u32,
    pub as_of: u64,
    /// sha256 of the canonical JSON of `snapshot`.
    pub hash: String,
    pub snapshot: EngineSnapshot,
}

pub fn snapshot_hash(s: &EngineSnapshot) -> String {
    sha256_hex(&serde_json::to_vec(s).expect("snapshots serialize"))
}

pub fn write_snapshot(dir: &Path, snap: &EngineSnapshot) -> Result<PathBuf, GovError> {
    let file = SnapshotFile { v: FORMAT_VERSION, as_of: snap.as_of, hash: snapshot_hash(snap), snapshot: snap.clone() };
    let path = dir.join(format!("snap-{}.json", snap.as_of));
    let tmp = dir.join(format!(".snap-{}.tmp", snap.as_of));
    let bytes = serde_json::to_vec(&file).map_err(|e| storage(e.to_string()))?;
    fs::write(&tmp, bytes).map_err(|e| storage(e.to_string()))?;
    fs::rename(&tmp, &path).map_err(|e| storage(e.to_string()))?;
    Ok(path)
}

/// The newest snapshot whose hash checks out and whose offset is covered by
/// the log (`as_of <= max_offset`).
pub fn latest_snapshot(dir: &Path, max_offset: u64) -> Option<EngineSnapshot> {
    let mut found: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("snap-")?.strip_suffix(".json")?.parse::<u64>().ok()?;
            Some((n, e.path()))
        })
        .filter(|(n, _)| *n <= max_offset)
        .collect();
    found.sort();
    found.into_iter().rev().find_map(|(_, p)| {
        let f: SnapshotFile = serde_json::from_slice(&fs::read(p).ok()?).ok()?;
        (f.v == FORMAT_VERSION && snapshot_hash(&f.snapshot) == f.hash).then_some(f.snapshot)
    })
}

/// Splits a log into command groups: each `CommandAccepted` and the events it caused.
pub fn command_groups(events: &[EngineEvent]) -> Vec<&[EngineEvent]> {
    let mut groups = Vec::new();
    let mut start = None;
    for (i, e) in events.iter().enumerate() {
        if e.kind == EventKind::CommandAccepted {
            if let Some(s) = start {
                groups.push(&events[s..i]);
            }
            start = Some(i);
        }
    }
    if let Some(s) = start {
        groups.push(&events[s..]);
    }
    groups
}

/// Re-runs one logged command group and checks the regenerated events match.
pub fn replay_group(engine: &mut Engine, group: &[EngineEvent]) -> Result<(), GovError> {
    let head = &group[0];
    let cmd: Command = serde_json::from_value(head.payload["command"].clone())
        .map_err(|e| storage(format!("offset {}: unreadable command: {e}", head.offset)))?;
    let tape: VecDeque<Json> =
        group.iter().filter(|e| e.kind == EventKind::ExternalResponse).map(|e| e.payload.clone()).collect();
    // The command's own outcome (including audited rejections) is part of the log already.
    let _ = engine.replay_command(head.ts, cmd, tape);
    let regenerated = engine.take_events();
    if regenerated.len() != group.len() || regenerated.iter().zip(group).any(|(a, b)| a != b) {
        return Err(storage(format!("replay diverged in the command at offset {}", head.offset)));
    }
    Ok(())
}

/// Rebuilds the engine from the genesis record, applying whole command
/// groups whose last event is at or before `up_to`.
pub fn replay(events: &[EngineEvent], platform: Box<dyn Platform>, up_to: Option<u64>) -> Result<Engine, GovError> {
    let genesis = events.first().ok_or_else(|| storage("log is empty"))?;
    let mut engine = Engine::from_genesis(genesis, platform)?;
    replay_onto(&mut engine, &events[1..], up_to)?;
    Ok(engine)
}

/// Like [`replay`], starting from a snapshot; `events` may include records
/// the snapshot already covers.
pub fn replay_from_snapshot(
    snap: &EngineSnapshot,
    events: &[EngineEvent],
    platform: Box<dyn Platform>,
    up_to: Option<u64>,
) -> Result<Engine, GovError> {
    let mut engine = Engine::from_snapshot(snap, platform)?;
    let rest: Vec<EngineEvent> = events.iter().filter(|e| e.offset > snap.as_of).cloned().collect();
    replay_onto(&mut engine, &rest, up_to)?;
    Ok(engine)
}

fn replay_onto(engine: &mut Engine, events: &[EngineEvent], up_to: Option<u64>) -> Result<(), GovError> {
    for g in command_groups(events) {
        let last = g.last().map_or(0, |e| e.offset);
        if up_to.is_some_and(|u| last > u) {
            break;
        }
        replay_group(engine, g)?;
    }
    Ok(())
}
