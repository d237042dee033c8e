//! Local event buffer: everything an agent has collected, pending review or
//! already submitted.
//!
//! Backed by a single append-only file of JSON operations (`record`,
//! `submitted`, `rejected`) that is replayed on open. The in-memory state is
//! guarded by one mutex, so a buffer can be shared between a collecting
//! thread and a transfer worker.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::envelope::MetricEnvelope;
use crate::time::Timestamp;

pub const DEFAULT_MAX_PENDING: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventState {
    Pending,
    Submitted,
}

impl std::str::FromStr for EventState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(EventState::Pending),
            "submitted" => Ok(EventState::Submitted),
            other => Err(format!("unknown state {other:?}, expected pending or submitted")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEvent {
    pub envelope: MetricEnvelope,
    pub state: EventState,
    pub created_at: Timestamp,
    pub submitted_at: Option<Timestamp>,
    /// Why the collector last rejected this event, if it did.
    pub last_error: Option<String>,
}

impl LocalEvent {
    pub fn id(&self) -> &str {
        self.envelope.event_id()
    }
}

/// Conjunction of the provided predicates; the empty filter matches all.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewFilter {
    /// Case-insensitive substring over the string leaves of `metrics`.
    pub keyword: Option<String>,
    /// Exact match on `metrics.application`.
    pub application: Option<String>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub state: Option<EventState>,
}

impl ReviewFilter {
    pub fn matches(&self, event: &LocalEvent) -> bool {
        let e = &event.envelope;
        if self.state.is_some_and(|s| s != event.state) {
            return false;
        }
        if self.from.is_some_and(|t0| e.timestamp < t0) || self.to.is_some_and(|t1| e.timestamp >= t1) {
            return false;
        }
        if let Some(app) = &self.application {
            if e.metrics.application() != Some(app.as_str()) {
                return false;
            }
        }
        if let Some(keyword) = &self.keyword {
            let needle = keyword.to_lowercase();
            if !e.metrics.string_leaves().iter().any(|leaf| leaf.to_lowercase().contains(&needle)) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BufferError {
    #[error("buffer holds {cap} pending events; submit some before recording more")]
    BufferFull { cap: usize },
    #[error("event {0:?} is already in the buffer")]
    Duplicate(String),
    #[error("no event with id {0:?}")]
    UnknownEvent(String),
    #[error("event {0:?} is not pending")]
    NotPending(String),
    #[error("buffer file is corrupt at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("buffer I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Op {
    Record { envelope: MetricEnvelope, created_at: Timestamp },
    Submitted { ids: Vec<String>, at: Timestamp },
    Rejected { id: String, error: String },
}

struct Inner {
    file: File,
    events: Vec<LocalEvent>,
    by_id: HashMap<String, usize>,
    pending: usize,
}

impl Inner {
    fn apply(&mut self, op: Op) -> Result<(), String> {
        match op {
            Op::Record { envelope, created_at } => {
                let id = envelope.event_id().to_string();
                if self.by_id.contains_key(&id) {
                    return Err(format!("duplicate record {id:?}"));
                }
                self.by_id.insert(id, self.events.len());
                self.events.push(LocalEvent {
                    envelope,
                    state: EventState::Pending,
                    created_at,
                    submitted_at: None,
                    last_error: None,
                });
                self.pending += 1;
            }
            Op::Submitted { ids, at } => {
                for id in ids {
                    let idx = *self.by_id.get(&id).ok_or_else(|| format!("unknown id {id:?}"))?;
                    let event = &mut self.events[idx];
                    if event.state == EventState::Pending {
                        event.state = EventState::Submitted;
                        event.submitted_at = Some(at);
                        event.last_error = None;
                        self.pending -= 1;
                    }
                }
            }
            Op::Rejected { id, error } => {
                let idx = *self.by_id.get(&id).ok_or_else(|| format!("unknown id {id:?}"))?;
                self.events[idx].last_error = Some(error);
            }
        }
        Ok(())
    }

    fn write(&mut self, op: &Op) -> Result<(), std::io::Error> {
        let mut line = serde_json::to_vec(op).expect("buffer op serializes");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

pub struct Buffer {
    path: PathBuf,
    max_pending: usize,
    inner: Mutex<Inner>,
}

impl Buffer {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BufferError> {
        Self::open_with_cap(path, DEFAULT_MAX_PENDING)
    }

    pub fn open_with_cap(path: impl AsRef<Path>, max_pending: usize) -> Result<Self, BufferError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut ops = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut buf = Vec::new();
            let mut line_no = 0;
            loop {
                buf.clear();
                let n = reader.read_until(b'\n', &mut buf)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = buf.last() == Some(&b'\n');
                match serde_json::from_slice::<Op>(&buf) {
                    Ok(op) if complete => {
                        ops.push((line_no, op));
                        good_len += n as u64;
                    }
                    // A torn final write never acknowledged its operation.
                    _ if !complete => break,
                    Err(e) => return Err(BufferError::Corrupt { line: line_no, detail: e.to_string() }),
                    Ok(_) => unreachable!(),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        let mut inner = Inner {
            file,
            events: Vec::new(),
            by_id: HashMap::new(),
            pending: 0,
        };
        for (line, op) in ops {
            inner.apply(op).map_err(|detail| BufferError::Corrupt { line, detail })?;
        }
        Ok(Buffer {
            path,
            max_pending,
            inner: Mutex::new(inner),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Persists a new pending event. Never evicts: a full buffer fails.
    pub fn record(&self, envelope: MetricEnvelope) -> Result<LocalEvent, BufferError> {
        let mut inner = self.inner.lock();
        let id = envelope.event_id().to_string();
        if inner.by_id.contains_key(&id) {
            return Err(BufferError::Duplicate(id));
        }
        if inner.pending >= self.max_pending {
            return Err(BufferError::BufferFull { cap: self.max_pending });
        }
        let op = Op::Record {
            envelope,
            created_at: Timestamp::now(),
        };
        inner.write(&op)?;
        inner.apply(op).expect("checked above");
        Ok(inner.events.last().expect("just pushed").clone())
    }

    pub fn get(&self, id: &str) -> Option<LocalEvent> {
        let inner = self.inner.lock();
        inner.by_id.get(id).map(|&i| inner.events[i].clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.lock().by_id.contains_key(id)
    }

    /// Matching events in recording order.
    pub fn list_events(&self, filter: &ReviewFilter) -> Vec<LocalEvent> {
        self.inner
            .lock()
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn pending_ids(&self) -> Vec<String> {
        self.inner
            .lock()
            .events
            .iter()
            .filter(|e| e.state == EventState::Pending)
            .map(|e| e.id().to_string())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending_count(&self) -> usize {
        self.inner.lock().pending
    }

    /// Pending envelopes for `ids`, in the order given.
    pub(crate) fn pending_envelopes(&self, ids: &[String]) -> Result<Vec<MetricEnvelope>, BufferError> {
        let inner = self.inner.lock();
        ids.iter()
            .map(|id| {
                let idx = *inner.by_id.get(id).ok_or_else(|| BufferError::UnknownEvent(id.clone()))?;
                let event = &inner.events[idx];
                if event.state != EventState::Pending {
                    return Err(BufferError::NotPending(id.clone()));
                }
                Ok(event.envelope.clone())
            })
            .collect()
    }

    pub(crate) fn mark_submitted(&self, ids: Vec<String>) -> Result<(), BufferError> {
        if ids.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock();
        if let Some(unknown) = ids.iter().find(|id| !inner.by_id.contains_key(*id)) {
            return Err(BufferError::UnknownEvent(unknown.clone()));
        }
        let op = Op::Submitted { ids, at: Timestamp::now() };
        inner.write(&op)?;
        inner.apply(op).map_err(|detail| BufferError::Corrupt { line: 0, detail })
    }

    pub(crate) fn mark_rejected(&self, id: String, error: String) -> Result<(), BufferError> {
        let mut inner = self.inner.lock();
        if !inner.by_id.contains_key(&id) {
            return Err(BufferError::UnknownEvent(id));
        }
        let op = Op::Rejected { id, error };
        inner.write(&op)?;
        inner.apply(op).map_err(|detail| BufferError::Corrupt { line: 0, detail })
    }
}
