//! Durable state: an append-only JSON-lines event log plus a periodic
//! snapshot, both inside one storage directory guarded by an exclusive
//! lock file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deliberate_core::session::{Session, SessionCommand};
use deliberate_core::{Dataset, TrainedModel};

use crate::error::ApiError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 64;

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTokens {
    pub participant: String,
    pub facilitator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedState {
    pub schema_version: u32,
    pub datasets: BTreeMap<String, Dataset>,
    pub sessions: BTreeMap<String, Session>,
    pub models: BTreeMap<String, TrainedModel>,
    pub tokens: BTreeMap<String, SessionTokens>,
}

impl Default for PersistedState {
    fn default() -> Self {
        PersistedState {
            schema_version: SCHEMA_VERSION,
            datasets: BTreeMap::new(),
            sessions: BTreeMap::new(),
            models: BTreeMap::new(),
            tokens: BTreeMap::new(),
        }
    }
}

/// One entry of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StoredEvent {
    DatasetRegistered {
        dataset_id: String,
        dataset: Box<Dataset>,
    },
    SessionCreated {
        session: Box<Session>,
        tokens: SessionTokens,
    },
    SessionCommand {
        session_id: String,
        command: SessionCommand,
        expected_version: Option<u64>,
    },
    ModelsStored {
        models: Vec<TrainedModel>,
    },
}

impl PersistedState {
    /// Applies one event. The state is untouched when an error is returned.
    pub fn apply(&mut self, event: &StoredEvent) -> Result<(), ApiError> {
        match event {
            StoredEvent::DatasetRegistered { dataset_id, dataset } => match self.datasets.get(dataset_id) {
                Some(existing) if existing == dataset.as_ref() => {}
                Some(_) => {
                    return Err(ApiError::new(
                        "DatasetExists",
                        format!("dataset `{dataset_id}` is already registered with different content"),
                    ))
                }
                None => {
                    self.datasets.insert(dataset_id.clone(), dataset.as_ref().clone());
                }
            },
            StoredEvent::SessionCreated { session, tokens } => {
                if self.sessions.contains_key(&session.session_id) {
                    return Err(ApiError::new(
                        "SessionExists",
                        format!("session `{}` already exists", session.session_id),
                    ));
                }
                if !self.datasets.contains_key(&session.dataset_id) {
                    return Err(ApiError::not_found("UnknownDataset", &session.dataset_id));
                }
                self.tokens.insert(session.session_id.clone(), tokens.clone());
                self.sessions
                    .insert(session.session_id.clone(), session.as_ref().clone());
            }
            StoredEvent::SessionCommand {
                session_id,
                command,
                expected_version,
            } => {
                let current = self
                    .sessions
                    .get(session_id)
                    .ok_or_else(|| ApiError::not_found("UnknownSession", session_id))?;
                let mut next = current.clone();
                next.apply(command, *expected_version)?;
                self.sessions.insert(session_id.clone(), next);
            }
            StoredEvent::ModelsStored { models } => {
                for m in models {
                    self.models.insert(m.model_id.clone(), m.clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    at: String,
    event: StoredEvent,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: PersistedState,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    seq: u64,
    since_snapshot: u64,
    snapshot_every: u64,
    _lock: File,
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> ApiError {
    ApiError::storage(format!("{what} {}: {e}", path.display()))
}

impl Store {
    /// Opens (or creates) the storage directory, takes the lock and
    /// rebuilds the state from the snapshot plus the log. A torn final log
    /// line is discarded.
    pub fn open(dir: impl Into<PathBuf>, snapshot_every: u64) -> Result<(Store, PersistedState), ApiError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err("cannot create storage directory", &dir, e))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io_err("cannot open lock file", &lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => {
                return Err(ApiError::storage(format!(
                    "storage directory {} is locked by another process",
                    dir.display()
                )))
            }
            Err(TryLockError::Error(e)) => return Err(io_err("cannot lock", &lock_path, e)),
        }

        let mut state = PersistedState::default();
        let mut seq = 0;
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(|e| io_err("cannot read", &snap_path, e))?;
            let snap: Snapshot = serde_json::from_str(&text)
                .map_err(|e| ApiError::storage(format!("corrupt snapshot {}: {e}", snap_path.display())))?;
            if snap.state.schema_version != SCHEMA_VERSION {
                return Err(ApiError::storage(format!(
                    "snapshot schema version {} is not supported",
                    snap.state.schema_version
                )));
            }
            state = snap.state;
            seq = snap.seq;
        }

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err("cannot open event log", &log_path, e))?;
        let mut text = String::new();
        log.read_to_string(&mut text)
            .map_err(|e| io_err("cannot read event log", &log_path, e))?;
        let mut valid_len = 0;
        let mut since_snapshot = 0;
        let mut rest = text.as_str();
        while !rest.is_empty() {
            let Some(end) = rest.find('\n') else {
                break;
            };
            let line = &rest[..end];
            rest = &rest[end + 1..];
            let entry: LogLine = match serde_json::from_str(line) {
                Ok(entry) => entry,
                Err(_) if rest.is_empty() => break,
                Err(e) => return Err(ApiError::storage(format!("corrupt event log at byte {valid_len}: {e}"))),
            };
            valid_len += end + 1;
            if entry.seq <= seq {
                continue;
            }
            state
                .apply(&entry.event)
                .map_err(|e| ApiError::storage(format!("event {} does not replay: {e}", entry.seq)))?;
            seq = entry.seq;
            since_snapshot += 1;
        }
        if valid_len < text.len() {
            log.set_len(valid_len as u64)
                .map_err(|e| io_err("cannot truncate torn event log", &log_path, e))?;
        }
        Ok((
            Store {
                dir,
                log,
                seq,
                since_snapshot,
                snapshot_every: snapshot_every.max(1),
                _lock: lock,
            },
            state,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Appends `event`, which the caller has already applied to produce
    /// `state`, and snapshots when the interval is reached.
    pub fn append(&mut self, event: &StoredEvent, state: &PersistedState) -> Result<(), ApiError> {
        let line = LogLine {
            seq: self.seq + 1,
            at: chrono::Utc::now().to_rfc3339(),
            event: event.clone(),
        };
        let mut bytes = serde_json::to_vec(&line).map_err(|e| ApiError::storage(e.to_string()))?;
        bytes.push(b'\n');
        let log_path = self.dir.join(LOG_FILE);
        self.log
            .write_all(&bytes)
            .and_then(|_| self.log.flush())
            .map_err(|e| io_err("cannot append to", &log_path, e))?;
        self.seq += 1;
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot(state)?;
        }
        Ok(())
    }

    /// Writes a snapshot of `state` and empties the log.
    pub fn snapshot(&mut self, state: &PersistedState) -> Result<(), ApiError> {
        let snap_path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let body = serde_json::to_vec(&Snapshot {
            seq: self.seq,
            state: state.clone(),
        })
        .map_err(|e| ApiError::storage(e.to_string()))?;
        let mut f = File::create(&tmp).map_err(|e| io_err("cannot create", &tmp, e))?;
        f.write_all(&body)
            .and_then(|_| f.sync_all())
            .map_err(|e| io_err("cannot write", &tmp, e))?;
        fs::rename(&tmp, &snap_path).map_err(|e| io_err("cannot replace", &snap_path, e))?;
        let log_path = self.dir.join(LOG_FILE);
        self.log
            .set_len(0)
            .map_err(|e| io_err("cannot truncate", &log_path, e))?;
        self.since_snapshot = 0;
        Ok(())
    }

    /// Deletes every stored session, dataset and model.
    pub fn wipe(&mut self) -> Result<(), ApiError> {
        let snap_path = self.dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            fs::remove_file(&snap_path).map_err(|e| io_err("cannot remove", &snap_path, e))?;
        }
        let log_path = self.dir.join(LOG_FILE);
        self.log
            .set_len(0)
            .map_err(|e| io_err("cannot truncate", &log_path, e))?;
        self.seq = 0;
        self.since_snapshot = 0;
        Ok(())
    }
}
