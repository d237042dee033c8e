//! Append-only, partitioned, deduplicating store for raw envelopes.
//!
//! ## Layout
//!
//! ```text
//! <root>/partitions/<YYYY-MM-DD>/<install_guid>.log
//! ```
//!
//! Each partition is one log file holding one canonical JSON line per
//! record (`envelope`, `received_at`, `partition`, `seq`). Line `n` of a log
//! is the record with `seq == n`. The record-id index is rebuilt in memory
//! from the logs when the store is opened, so the log is the only thing
//! written on the append path. A torn final line (a crash mid-write) is
//! truncated away on open; any other unreadable line is reported as
//! [`StoreError::CorruptPartition`].
//!
//! ## Concurrency
//!
//! Appends for one install are serialized by a per-install mutex, which
//! owns the dedup index and the partition writers of that install. Scans
//! take short read locks on partition record lists and never wait for a
//! writer's I/O.

mod cursor;

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use cursor::{BadCursor, Cursor};

use crate::canonical;
use crate::envelope::{parse_uuid_strict, MetricEnvelope, RecordId};
use crate::time::Timestamp;

pub const MAX_SCAN_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionKey {
    pub day: NaiveDate,
    pub install_guid: Uuid,
}

impl PartitionKey {
    pub fn for_envelope(e: &MetricEnvelope) -> Self {
        PartitionKey {
            day: e.timestamp.day(),
            install_guid: e.agent.install_guid,
        }
    }
}

impl std::fmt::Display for PartitionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.day.format("%Y-%m-%d"), self.install_guid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub envelope: MetricEnvelope,
    pub received_at: Timestamp,
    pub partition: PartitionKey,
    pub seq: u64,
}

impl StoredRecord {
    pub fn record_id(&self) -> RecordId {
        self.envelope.record_id()
    }

    fn to_line(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("stored record serializes");
        let mut line = canonical::to_canonical_vec(&value);
        line.push(b'\n');
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppendOutcome {
    Fresh,
    Duplicate,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store is full ({used} of {limit} bytes used)")]
    StorageFull { used: u64, limit: u64 },
    #[error("partition {partition} is corrupt: {detail}")]
    CorruptPartition { partition: String, detail: String },
    #[error(transparent)]
    BadCursor(#[from] BadCursor),
    #[error("scan limit must be between 1 and {MAX_SCAN_LIMIT}, got {0}")]
    BadLimit(usize),
    #[error("store I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct StoreOptions {
    /// `fsync` each appended record before acknowledging it.
    pub fsync: bool,
    /// Total log bytes allowed before appends fail with `StorageFull`.
    pub max_bytes: Option<u64>,
}

/// Exact-match and half-open time-range predicate for scans.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanFilter {
    pub install_guid: Option<Uuid>,
    pub event_type: Option<String>,
    /// Inclusive lower bound on `envelope.timestamp`.
    pub from: Option<Timestamp>,
    /// Exclusive upper bound on `envelope.timestamp`.
    pub to: Option<Timestamp>,
}

impl ScanFilter {
    pub fn matches(&self, record: &StoredRecord) -> bool {
        let e = &record.envelope;
        self.install_guid.is_none_or(|g| g == e.agent.install_guid)
            && self.event_type.as_deref().is_none_or(|t| t == e.event_type())
            && self.from.is_none_or(|t0| e.timestamp >= t0)
            && self.to.is_none_or(|t1| e.timestamp < t1)
    }

    fn admits_partition(&self, key: &PartitionKey) -> bool {
        if self.install_guid.is_some_and(|g| g != key.install_guid) {
            return false;
        }
        if self.from.is_some_and(|t0| key.day < t0.day()) {
            return false;
        }
        if let Some(t1) = self.to {
            let last_day = Timestamp::from_millis(t1.as_millis() - 1).day();
            if key.day > last_day {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPage {
    pub records: Vec<StoredRecord>,
    pub next: Cursor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub count: u64,
    pub bytes: u64,
    pub min_timestamp: Option<Timestamp>,
    pub max_timestamp: Option<Timestamp>,
}

struct Partition {
    records: RwLock<Vec<Arc<StoredRecord>>>,
    bytes: AtomicU64,
}

#[derive(Default)]
struct Shard {
    index: HashMap<String, (NaiveDate, u64)>,
    writers: HashMap<NaiveDate, File>,
}

pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    shards: RwLock<HashMap<Uuid, Arc<Mutex<Shard>>>>,
    catalog: RwLock<BTreeMap<PartitionKey, Arc<Partition>>>,
    total_bytes: AtomicU64,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let partitions_dir = root.join("partitions");
        fs::create_dir_all(&partitions_dir)?;

        let mut shards: HashMap<Uuid, Shard> = HashMap::new();
        let mut catalog = BTreeMap::new();
        let mut total = 0u64;

        let mut day_dirs: Vec<_> = fs::read_dir(&partitions_dir)?.collect::<Result<_, _>>()?;
        day_dirs.sort_by_key(|d| d.file_name());
        for day_dir in day_dirs {
            let name = day_dir.file_name().to_string_lossy().into_owned();
            let Ok(day) = NaiveDate::parse_from_str(&name, "%Y-%m-%d") else {
                continue;
            };
            for entry in fs::read_dir(day_dir.path())? {
                let entry = entry?;
                let file_name = entry.file_name().to_string_lossy().into_owned();
                let Some(guid) = file_name.strip_suffix(".log").and_then(parse_uuid_strict) else {
                    continue;
                };
                let key = PartitionKey { day, install_guid: guid };
                let (records, bytes) = load_partition(&entry.path(), key)?;
                let shard = shards.entry(guid).or_default();
                for r in &records {
                    let previous = shard.index.insert(r.envelope.event_id().to_string(), (day, r.seq));
                    if previous.is_some() {
                        return Err(corrupt(&key, format!("duplicate event_id {:?}", r.envelope.event_id())));
                    }
                }
                total += bytes;
                catalog.insert(
                    key,
                    Arc::new(Partition {
                        records: RwLock::new(records),
                        bytes: AtomicU64::new(bytes),
                    }),
                );
            }
        }

        Ok(Store {
            root,
            options,
            shards: RwLock::new(
                shards
                    .into_iter()
                    .map(|(g, s)| (g, Arc::new(Mutex::new(s))))
                    .collect(),
            ),
            catalog: RwLock::new(catalog),
            total_bytes: AtomicU64::new(total),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn partition_path(&self, key: &PartitionKey) -> PathBuf {
        self.root
            .join("partitions")
            .join(key.day.format("%Y-%m-%d").to_string())
            .join(format!("{}.log", key.install_guid))
    }

    fn shard(&self, guid: Uuid) -> Arc<Mutex<Shard>> {
        if let Some(s) = self.shards.read().get(&guid) {
            return s.clone();
        }
        self.shards.write().entry(guid).or_default().clone()
    }

    fn partition(&self, key: &PartitionKey) -> Option<Arc<Partition>> {
        self.catalog.read().get(key).cloned()
    }

    /// Appends unless the record id was seen before; a repeated id returns
    /// the first stored record untouched.
    pub fn append(&self, envelope: MetricEnvelope, received_at: Timestamp) -> Result<(StoredRecord, AppendOutcome), StoreError> {
        let key = PartitionKey::for_envelope(&envelope);
        let shard = self.shard(key.install_guid);
        let mut shard = shard.lock();

        if let Some(&(day, seq)) = shard.index.get(envelope.event_id()) {
            let existing_key = PartitionKey { day, install_guid: key.install_guid };
            let partition = self
                .partition(&existing_key)
                .ok_or_else(|| corrupt(&existing_key, "indexed partition missing".into()))?;
            let record = partition
                .records
                .read()
                .get(seq as usize)
                .cloned()
                .ok_or_else(|| corrupt(&existing_key, format!("indexed seq {seq} missing")))?;
            return Ok(((*record).clone(), AppendOutcome::Duplicate));
        }

        let partition = match self.partition(&key) {
            Some(p) => p,
            None => {
                let path = self.partition_path(&key);
                fs::create_dir_all(path.parent().expect("partition path has parent"))?;
                self.catalog
                    .write()
                    .entry(key)
                    .or_insert_with(|| {
                        Arc::new(Partition {
                            records: RwLock::new(Vec::new()),
                            bytes: AtomicU64::new(0),
                        })
                    })
                    .clone()
            }
        };

        let seq = partition.records.read().len() as u64;
        let record = StoredRecord {
            envelope,
            received_at,
            partition: key,
            seq,
        };
        let line = record.to_line();

        if let Some(limit) = self.options.max_bytes {
            let used = self.total_bytes.load(Ordering::Relaxed);
            if used + line.len() as u64 > limit {
                return Err(StoreError::StorageFull { used, limit });
            }
        }

        let file = match shard.writers.entry(key.day) {
            Entry::Occupied(writer) => writer.into_mut(),
            Entry::Vacant(slot) => {
                slot.insert(OpenOptions::new().create(true).append(true).open(self.partition_path(&key))?)
            }
        };
        file.write_all(&line)?;
        if self.options.fsync {
            file.sync_data()?;
        }

        partition.bytes.fetch_add(line.len() as u64, Ordering::Relaxed);
        self.total_bytes.fetch_add(line.len() as u64, Ordering::Relaxed);
        partition.records.write().push(Arc::new(record.clone()));
        shard
            .index
            .insert(record.envelope.event_id().to_string(), (key.day, seq));
        Ok((record, AppendOutcome::Fresh))
    }

    /// One page of records at or after `from`, in `(day, install_guid, seq)`
    /// order. Concatenating successive pages equals one unbounded scan.
    pub fn scan(&self, from: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, StoreError> {
        if limit == 0 || limit > MAX_SCAN_LIMIT {
            return Err(StoreError::BadLimit(limit));
        }
        let partitions: Vec<(PartitionKey, Arc<Partition>)> = {
            let catalog = self.catalog.read();
            match from.position() {
                None => catalog.iter().map(|(k, p)| (*k, p.clone())).collect(),
                Some((key, _)) => catalog.range(*key..).map(|(k, p)| (*k, p.clone())).collect(),
            }
        };

        let mut records = Vec::new();
        let mut next = from.clone();
        for (key, partition) in partitions {
            let start = match from.position() {
                Some((k, seq)) if *k == key => seq,
                _ => 0,
            };
            let snapshot: Vec<Arc<StoredRecord>> = {
                let guard = partition.records.read();
                guard.get(start as usize..).map(<[_]>::to_vec).unwrap_or_default()
            };
            let end = start + snapshot.len() as u64;
            if filter.admits_partition(&key) {
                for record in snapshot {
                    if filter.matches(&record) {
                        records.push((*record).clone());
                        if records.len() == limit {
                            return Ok(ScanPage { records, next: Cursor::at(key, record.seq + 1) });
                        }
                    }
                }
            }
            next = Cursor::at(key, end);
        }
        Ok(ScanPage { records, next })
    }

    /// Drains every page from `from` to the current end.
    pub fn scan_all(&self, filter: &ScanFilter) -> Result<Vec<StoredRecord>, StoreError> {
        let mut cursor = Cursor::start();
        let mut out = Vec::new();
        loop {
            let page = self.scan(&cursor, MAX_SCAN_LIMIT, filter)?;
            let done = page.records.len() < MAX_SCAN_LIMIT;
            out.extend(page.records);
            cursor = page.next;
            if done {
                return Ok(out);
            }
        }
    }

    pub fn stats(&self) -> BTreeMap<PartitionKey, PartitionStats> {
        let catalog = self.catalog.read();
        catalog
            .iter()
            .map(|(key, partition)| {
                let records = partition.records.read();
                let stats = PartitionStats {
                    count: records.len() as u64,
                    bytes: partition.bytes.load(Ordering::Relaxed),
                    min_timestamp: records.iter().map(|r| r.envelope.timestamp).min(),
                    max_timestamp: records.iter().map(|r| r.envelope.timestamp).max(),
                };
                (*key, stats)
            })
            .collect()
    }

    pub fn partition_count(&self) -> usize {
        self.catalog.read().len()
    }

    pub fn record_count(&self) -> u64 {
        self.catalog
            .read()
            .values()
            .map(|p| p.records.read().len() as u64)
            .sum()
    }
}

fn corrupt(key: &PartitionKey, detail: String) -> StoreError {
    StoreError::CorruptPartition {
        partition: key.to_string(),
        detail,
    }
}

/// Reads one partition log, truncating a torn final line.
fn load_partition(path: &Path, key: PartitionKey) -> Result<(Vec<Arc<StoredRecord>>, u64), StoreError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        let parsed = if complete {
            serde_json::from_slice::<StoredRecord>(&buf[..buf.len() - 1]).ok()
        } else {
            None
        };
        match parsed {
            Some(record) => {
                let expected = records.len() as u64;
                if record.seq != expected || record.partition != key || PartitionKey::for_envelope(&record.envelope) != key {
                    return Err(corrupt(&key, format!("record at line {expected} is out of place")));
                }
                records.push(Arc::new(record));
                good_len += n as u64;
            }
            None => {
                // Only a torn tail is recoverable.
                let mut rest = Vec::new();
                std::io::Read::read_to_end(&mut reader, &mut rest)?;
                if !rest.is_empty() || complete {
                    return Err(corrupt(&key, format!("unreadable record at line {}", records.len())));
                }
                let file = OpenOptions::new().write(true).open(path)?;
                file.set_len(good_len)?;
                break;
            }
        }
    }
    Ok((records, good_len))
}
