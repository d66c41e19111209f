//! Append-only session logs with periodic snapshots.
//!
//! A session's log starts with a header line, followed by one JSON object
//! per committed change or emitted event. Replaying the changes over an
//! empty session rebuilds it exactly. A final line cut short by a crash is
//! ignored on load.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use needcraft_core::orchestrator::{SessionChange, SessionMode, SessionState, UiEvent};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage I/O failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("session {0} already exists")]
    Exists(String),
    #[error("session {0} is not stored")]
    Missing(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: String,
    pub tag: String,
    pub mode: SessionMode,
    pub query: String,
    /// RFC 3339 creation time.
    pub created_at: String,
}

/// An event with its per-session sequence number, starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqEvent {
    pub seq: u64,
    pub event: UiEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header(SessionHeader),
    /// `n` counts changes from 1.
    Change { n: u64, change: SessionChange },
    Event(SeqEvent),
}

/// State as of the first `changes` changes of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub changes: u64,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSession {
    pub header: SessionHeader,
    pub records: Vec<LogRecord>,
    pub snapshot: Option<Snapshot>,
}

pub trait SessionStore: Send + Sync {
    fn create(&self, header: &SessionHeader) -> Result<(), StoreError>;
    fn append(&self, id: &str, records: &[LogRecord]) -> Result<(), StoreError>;
    fn write_snapshot(&self, id: &str, snapshot: &Snapshot) -> Result<(), StoreError>;
    fn load(&self, id: &str) -> Result<StoredSession, StoreError>;
    fn list(&self) -> Result<Vec<String>, StoreError>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    sessions: Mutex<HashMap<String, StoredSession>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SessionStore for MemoryStore {
    fn create(&self, header: &SessionHeader) -> Result<(), StoreError> {
        let mut sessions = self.sessions.lock().expect("store lock");
        if sessions.contains_key(&header.id) {
            return Err(StoreError::Exists(header.id.clone()));
        }
        sessions.insert(
            header.id.clone(),
            StoredSession {
                header: header.clone(),
                records: vec![LogRecord::Header(header.clone())],
                snapshot: None,
            },
        );
        Ok(())
    }

    fn append(&self, id: &str, records: &[LogRecord]) -> Result<(), StoreError> {
        let mut sessions = self.sessions.lock().expect("store lock");
        let stored = sessions.get_mut(id).ok_or_else(|| StoreError::Missing(id.into()))?;
        stored.records.extend_from_slice(records);
        Ok(())
    }

    fn write_snapshot(&self, id: &str, snapshot: &Snapshot) -> Result<(), StoreError> {
        let mut sessions = self.sessions.lock().expect("store lock");
        let stored = sessions.get_mut(id).ok_or_else(|| StoreError::Missing(id.into()))?;
        stored.snapshot = Some(snapshot.clone());
        Ok(())
    }

    fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        self.sessions
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::Missing(id.into()))
    }

    fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = self.sessions.lock().expect("store lock").keys().cloned().collect();
        ids.sort();
        Ok(ids)
    }
}

const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

/// One directory per session under `root`.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    open: Mutex<HashMap<String, File>>,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(Self {
            root,
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn write_lines(file: &mut File, path: &Path, records: &[LogRecord]) -> Result<(), StoreError> {
        let mut buf = String::new();
        for record in records {
            buf.push_str(&serde_json::to_string(record).expect("records serialize"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(io(path))?;
        file.flush().map_err(io(path))
    }
}

impl SessionStore for FileStore {
    fn create(&self, header: &SessionHeader) -> Result<(), StoreError> {
        let dir = self.dir(&header.id);
        if dir.join(LOG_FILE).exists() {
            return Err(StoreError::Exists(header.id.clone()));
        }
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        Self::write_lines(&mut file, &path, &[LogRecord::Header(header.clone())])?;
        self.open.lock().expect("store lock").insert(header.id.clone(), file);
        Ok(())
    }

    fn append(&self, id: &str, records: &[LogRecord]) -> Result<(), StoreError> {
        let path = self.dir(id).join(LOG_FILE);
        let mut open = self.open.lock().expect("store lock");
        if !open.contains_key(id) {
            if !path.exists() {
                return Err(StoreError::Missing(id.into()));
            }
            let file = OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
            open.insert(id.to_string(), file);
        }
        Self::write_lines(open.get_mut(id).expect("just opened"), &path, records)
    }

    fn write_snapshot(&self, id: &str, snapshot: &Snapshot) -> Result<(), StoreError> {
        let dir = self.dir(id);
        let tmp = dir.join("snapshot.json.tmp");
        let bytes = serde_json::to_vec(snapshot).expect("snapshots serialize");
        fs::write(&tmp, bytes).map_err(io(&tmp))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::rename(&tmp, &path).map_err(io(&path))
    }

    fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        let dir = self.dir(id);
        let path = dir.join(LOG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::Missing(id.into()),
            _ => io(&path)(e),
        })?;
        let mut records = Vec::new();
        let mut offset = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (i, raw) in lines.iter().enumerate() {
            let line = raw.trim_end_matches('\n');
            let last = i + 1 == lines.len();
            if !line.trim().is_empty() {
                match serde_json::from_str::<LogRecord>(line) {
                    Ok(r) => records.push(r),
                    // A torn final line is what a crash mid-write leaves
                    // behind; cut it so later appends start on a clean line.
                    Err(_) if last => {
                        tracing::warn!(session = id, "dropping torn final log line");
                        self.open.lock().expect("store lock").remove(id);
                        let file = OpenOptions::new().write(true).open(&path).map_err(io(&path))?;
                        file.set_len(offset as u64).map_err(io(&path))?;
                        break;
                    }
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            path,
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            offset += raw.len();
        }
        if offset == text.len() && !text.is_empty() && !text.ends_with('\n') {
            let mut file = OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
            file.write_all(b"\n").map_err(io(&path))?;
        }
        let header = match records.first() {
            Some(LogRecord::Header(h)) => h.clone(),
            _ => {
                return Err(StoreError::Corrupt {
                    path,
                    line: 1,
                    message: "log does not start with a header".into(),
                })
            }
        };
        let snap_path = dir.join(SNAPSHOT_FILE);
        let snapshot = match fs::read(&snap_path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(s) => Some(s),
                Err(e) => {
                    tracing::warn!(session = id, error = %e, "ignoring unreadable snapshot");
                    None
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(io(&snap_path)(e)),
        };
        Ok(StoredSession {
            header,
            records,
            snapshot,
        })
    }

    fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io(&self.root))? {
            let entry = entry.map_err(io(&self.root))?;
            if entry.path().join(LOG_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// A session rebuilt from its stored log.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub header: SessionHeader,
    pub state: SessionState,
    pub changes: u64,
    pub events: Vec<SeqEvent>,
}

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("change {n} does not apply: {message}")]
    Apply { n: u64, message: String },
    #[error("log sequence broken at {what} {n}")]
    Gap { what: &'static str, n: u64 },
}

impl StoredSession {
    /// Rebuilds the session from the snapshot (if usable) plus later changes.
    pub fn recover(self) -> Result<Recovered, RecoverError> {
        let h = &self.header;
        let (mut state, base) = match self.snapshot {
            Some(s) if s.state.id == h.id => (s.state, s.changes),
            _ => (SessionState::new(h.id.clone(), h.tag.clone(), h.mode), 0),
        };
        let mut changes = 0u64;
        let mut events = Vec::new();
        for record in self.records {
            match record {
                LogRecord::Header(_) => {}
                LogRecord::Change { n, change } => {
                    if n != changes + 1 {
                        return Err(RecoverError::Gap { what: "change", n });
                    }
                    changes = n;
                    if n > base {
                        state.apply(&change).map_err(|e| RecoverError::Apply {
                            n,
                            message: e.to_string(),
                        })?;
                    }
                }
                LogRecord::Event(e) => {
                    if e.seq != events.len() as u64 + 1 {
                        return Err(RecoverError::Gap { what: "event", n: e.seq });
                    }
                    events.push(e);
                }
            }
        }
        if changes < base {
            // The snapshot claims changes the log no longer has.
            return Err(RecoverError::Gap { what: "change", n: changes + 1 });
        }
        Ok(Recovered {
            header: self.header,
            state,
            changes,
            events,
        })
    }
}
