//! Push channel for agents and the identical pull channel for unifiers.
//!
//! [`Collector`] holds the service logic and is usable in-process;
//! [`http::router`] exposes it over HTTP and [`client::CollectorClient`] is
//! the matching blocking client.

pub mod client;
pub mod http;

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::envelope::{check_code_name, validate_envelope, ValidationError, ValidationIssue};
use crate::store::{AppendOutcome, Cursor, ScanFilter, ScanPage, Store, StoreError, StoreOptions};
use crate::time::Timestamp;

pub const MAX_BATCH: usize = 1_000;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Agent credential pair carried in `X-Secret-Key` / `X-Install-Guid`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credentials {
    pub secret_key: Uuid,
    pub install_guid: Uuid,
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials")
            .field("secret_key", &"<redacted>")
            .field("install_guid", &self.install_guid)
            .finish()
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub code_name: String,
    pub full_name: String,
    pub secret_key: Uuid,
    pub install_guid: Uuid,
    pub created_at: Timestamp,
}

impl Registration {
    pub fn credentials(&self) -> Credentials {
        Credentials {
            secret_key: self.secret_key,
            install_guid: self.install_guid,
        }
    }
}

impl fmt::Debug for Registration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registration")
            .field("code_name", &self.code_name)
            .field("full_name", &self.full_name)
            .field("secret_key", &"<redacted>")
            .field("install_guid", &self.install_guid)
            .field("created_at", &self.created_at)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub error: ValidationError,
}

/// Per-element outcome of a batch: `accepted + duplicates + rejected.len()`
/// always equals the batch size.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: Vec<Rejection>,
}

impl SubmitReceipt {
    pub fn total(&self) -> usize {
        self.accepted + self.duplicates + self.rejected.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub partitions: usize,
    pub records: u64,
    pub uptime_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CollectorError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("batch of {0} exceeds the limit of {MAX_BATCH}")]
    BatchTooLarge(usize),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("registry I/O error: {0}")]
    Registry(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub data_dir: PathBuf,
    /// Credential accepted on the pull and analytics routes.
    pub reader_key: String,
    /// When set, registration requires this key in `X-Secret-Key`.
    pub registration_key: Option<String>,
    pub store: StoreOptions,
}

impl CollectorConfig {
    pub fn new(data_dir: impl Into<PathBuf>, reader_key: impl Into<String>) -> Self {
        CollectorConfig {
            data_dir: data_dir.into(),
            reader_key: reader_key.into(),
            registration_key: None,
            store: StoreOptions::default(),
        }
    }
}

struct Registry {
    path: PathBuf,
    by_guid: HashMap<Uuid, Registration>,
}

impl Registry {
    fn open(path: PathBuf) -> Result<Self, std::io::Error> {
        let mut by_guid = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(fs::File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                // A torn final line means the registration was never acknowledged.
                if let Ok(reg) = serde_json::from_str::<Registration>(&line) {
                    by_guid.insert(reg.install_guid, reg);
                }
            }
        }
        Ok(Registry { path, by_guid })
    }

    fn insert(&mut self, reg: Registration) -> Result<(), std::io::Error> {
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_vec(&reg).expect("registration serializes");
        line.push(b'\n');
        file.write_all(&line)?;
        file.sync_data()?;
        self.by_guid.insert(reg.install_guid, reg);
        Ok(())
    }
}

pub struct Collector {
    config: CollectorConfig,
    store: Store,
    registry: Mutex<Registry>,
    started: Instant,
}

impl Collector {
    pub fn open(config: CollectorConfig) -> Result<Self, CollectorError> {
        fs::create_dir_all(&config.data_dir)?;
        let store = Store::open_with(config.data_dir.join("store"), config.store.clone())?;
        let registry = Registry::open(config.data_dir.join("registrations.jsonl"))?;
        Ok(Collector {
            config,
            store,
            registry: Mutex::new(registry),
            started: Instant::now(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    pub fn register_agent(&self, code_name: &str, full_name: &str) -> Result<Registration, CollectorError> {
        check_code_name(code_name).map_err(|r| CollectorError::BadRequest(format!("code_name {r}")))?;
        let reg = Registration {
            code_name: code_name.to_string(),
            full_name: full_name.to_string(),
            secret_key: Uuid::new_v4(),
            install_guid: Uuid::new_v4(),
            created_at: Timestamp::now(),
        };
        self.registry.lock().insert(reg.clone())?;
        tracing::info!(install_guid = %reg.install_guid, code_name, "agent registered");
        Ok(reg)
    }

    pub fn check_registration_key(&self, presented: Option<&str>) -> Result<(), CollectorError> {
        match &self.config.registration_key {
            None => Ok(()),
            Some(key) if presented.is_some_and(|p| constant_time_eq(p.as_bytes(), key.as_bytes())) => Ok(()),
            Some(_) => Err(CollectorError::Unauthorized),
        }
    }

    pub fn authenticate(&self, creds: &Credentials) -> Result<(), CollectorError> {
        let registry = self.registry.lock();
        match registry.by_guid.get(&creds.install_guid) {
            Some(reg) if constant_time_eq(reg.secret_key.as_bytes(), creds.secret_key.as_bytes()) => Ok(()),
            _ => Err(CollectorError::Unauthorized),
        }
    }

    pub fn authenticate_reader(&self, presented: Option<&str>) -> Result<(), CollectorError> {
        match presented {
            Some(p) if constant_time_eq(p.as_bytes(), self.config.reader_key.as_bytes()) => Ok(()),
            _ => Err(CollectorError::Unauthorized),
        }
    }

    /// Validates and appends each element independently.
    pub fn submit_events(&self, creds: &Credentials, batch: &[Value]) -> Result<SubmitReceipt, CollectorError> {
        self.authenticate(creds)?;
        if batch.len() > MAX_BATCH {
            return Err(CollectorError::BatchTooLarge(batch.len()));
        }
        if batch.is_empty() {
            return Err(CollectorError::BadRequest("empty batch".into()));
        }
        let received_at = Timestamp::now();
        let mut receipt = SubmitReceipt::default();
        for (index, raw) in batch.iter().enumerate() {
            let envelope = match validate_envelope(raw) {
                Ok(e) => e,
                Err(error) => {
                    receipt.rejected.push(Rejection { index, error });
                    continue;
                }
            };
            if envelope.agent.install_guid != creds.install_guid || envelope.agent.secret_key != creds.secret_key {
                receipt.rejected.push(Rejection {
                    index,
                    error: ValidationError::single(ValidationIssue::CredentialMismatch),
                });
                continue;
            }
            match self.store.append(envelope, received_at)?.1 {
                AppendOutcome::Fresh => receipt.accepted += 1,
                AppendOutcome::Duplicate => receipt.duplicates += 1,
            }
        }
        Ok(receipt)
    }

    pub fn pull_events(
        &self,
        reader_key: Option<&str>,
        cursor: &Cursor,
        limit: usize,
        filter: &ScanFilter,
    ) -> Result<ScanPage, CollectorError> {
        self.authenticate_reader(reader_key)?;
        Ok(self.store.scan(cursor, limit, filter)?)
    }

    pub fn health(&self) -> Health {
        Health {
            version: VERSION.to_string(),
            partitions: self.store.partition_count(),
            records: self.store.record_count(),
            uptime_s: self.started.elapsed().as_secs_f64(),
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
