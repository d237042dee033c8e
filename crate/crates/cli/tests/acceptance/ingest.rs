//! Agents drain their buffers through a transport that drops requests,
//! loses acknowledgements and redelivers batches, while the collector and
//! the agents restart at random. The store must end up holding exactly the
//! deduplicated intent, and replaying everything after a restart must leave
//! the partition logs byte-identical.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use devmetrics::agent::{submit_selected, Buffer, BufferError, Transport, TransportError};
use devmetrics::collector::{Collector, CollectorConfig, Credentials, SubmitReceipt};
use devmetrics::envelope::validate_envelope;
use devmetrics::store::ScanFilter;
use rand::Rng;
use serde_json::{json, Value};

use crate::support::{rng, tree_bytes, Install, TestRng, DAY_MS, EPOCH_MS};
use crate::{ensure, Check};

const CASES: u64 = 500;

type Slot = Arc<RwLock<Option<Arc<Collector>>>>;

struct FaultyTransport {
    collector: Slot,
    credentials: Credentials,
    rng: Mutex<TestRng>,
    faults: Arc<AtomicUsize>,
}

impl FaultyTransport {
    fn deliver(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        let collector = self.collector.read().unwrap().clone().expect("collector is running");
        collector
            .submit_events(&self.credentials, batch)
            .map_err(|e| TransportError::Unreachable(e.to_string()))
    }
}

impl Transport for FaultyTransport {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        let roll = self.rng.lock().unwrap().random_range(0..10);
        match roll {
            0 | 1 => {
                self.faults.fetch_add(1, Ordering::Relaxed);
                Err(TransportError::Unreachable("request lost".into()))
            }
            2 | 3 => {
                self.deliver(batch)?;
                self.faults.fetch_add(1, Ordering::Relaxed);
                Err(TransportError::Unreachable("response lost".into()))
            }
            4 => {
                self.faults.fetch_add(1, Ordering::Relaxed);
                self.deliver(batch)?;
                self.deliver(batch)
            }
            _ => self.deliver(batch),
        }
    }
}

struct Party {
    install: Install,
    credentials: Credentials,
    buffer_path: PathBuf,
    buffer: Option<Buffer>,
    transport: FaultyTransport,
}

#[derive(Default)]
struct Tally {
    intents: usize,
    restarts: usize,
    raw_batches: usize,
}

fn restart_collector(slot: &Slot, config: &CollectorConfig) -> Result<(), String> {
    let mut guard = slot.write().unwrap();
    *guard = None;
    *guard = Some(Arc::new(Collector::open(config.clone()).map_err(|e| e.to_string())?));
    Ok(())
}

fn one_case(seed: u64, faults: &Arc<AtomicUsize>, tally: &mut Tally) -> Result<(), String> {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let config = CollectorConfig::new(dir.path().join("server"), "reader");
    let slot: Slot = Arc::new(RwLock::new(None));
    restart_collector(&slot, &config)?;

    // (install_guid, event_id) -> the document that was recorded first.
    let mut intent: BTreeMap<(String, String), Value> = BTreeMap::new();
    let mut parties = Vec::new();
    for a in 0..rng.random_range(1..=3usize) {
        let reg = slot.read().unwrap().as_ref().unwrap().register_agent(&format!("agent-{a}"), "Acceptance agent").unwrap();
        let install = Install::registered(&reg);
        let buffer_path = dir.path().join(format!("buffer-{a}.log"));
        let buffer = Buffer::open(&buffer_path).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=40usize);
        let pool = n * 3 / 4 + 1;
        for i in 0..n {
            let id = format!("ev-{}", rng.random_range(0..pool));
            let doc = install.document(
                EPOCH_MS + rng.random_range(0..3 * DAY_MS),
                json!({ "event_id": id, "event_type": "obs", "seq": i, "note": "intent" }),
            );
            let envelope = validate_envelope(&doc).map_err(|e| e.to_string())?;
            match buffer.record(envelope) {
                Ok(_) => {
                    let fresh = intent.insert((install.install_guid.clone(), id.clone()), doc).is_none();
                    ensure!(fresh, "buffer accepted {id} twice");
                }
                Err(BufferError::Duplicate(_)) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
        parties.push(Party {
            install,
            credentials: reg.credentials(),
            buffer_path,
            buffer: Some(buffer),
            transport: FaultyTransport {
                collector: slot.clone(),
                credentials: reg.credentials(),
                rng: Mutex::new(crate::support::rng(seed.wrapping_mul(31).wrapping_add(a as u64 + 1))),
                faults: faults.clone(),
            },
        });
    }

    for _round in 0..1_000 {
        if parties.iter().all(|p| p.buffer.as_ref().unwrap().pending_count() == 0) {
            break;
        }
        if rng.random_bool(0.08) {
            restart_collector(&slot, &config)?;
            tally.restarts += 1;
        }
        for party in &mut parties {
            if rng.random_bool(0.05) {
                party.buffer = None;
                party.buffer = Some(Buffer::open(&party.buffer_path).map_err(|e| e.to_string())?);
                tally.restarts += 1;
            }
            let buffer = party.buffer.as_ref().unwrap();
            let pending = buffer.pending_ids();
            if pending.is_empty() {
                continue;
            }
            let mut ids: Vec<String> = pending.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
            if ids.is_empty() || rng.random_bool(0.4) {
                ids = pending;
            }
            match submit_selected(buffer, &ids, &party.transport) {
                Ok(receipt) => ensure!(receipt.rejected.is_empty(), "valid events rejected: {:?}", receipt.rejected),
                Err(e) if e.is_retryable() => {}
                Err(e) => return Err(format!("submit failed: {e}")),
            }
        }
    }
    for party in &parties {
        ensure!(party.buffer.as_ref().unwrap().pending_count() == 0, "buffer did not drain");
    }

    // Direct batches: a bad element and duplicates must not affect the rest.
    if rng.random_bool(0.5) {
        tally.raw_batches += 1;
        let party = &parties[rng.random_range(0..parties.len())];
        let guid = party.install.install_guid.clone();
        let known = intent.iter().find(|((g, _), _)| *g == guid).map(|(_, d)| d.clone()).unwrap();
        let fresh: Vec<Value> = (0..rng.random_range(1..=5))
            .map(|j| party.install.document(EPOCH_MS + j * 1_000, json!({ "event_id": format!("raw-{j}"), "event_type": "obs" })))
            .collect();
        let mut batch = fresh.clone();
        batch.push(json!({ "timestamp": "2016-11-15T00:00:00.000Z", "agent": {}, "metrics": {} }));
        batch.push(known);
        batch.push(fresh[0].clone());
        let collector = slot.read().unwrap().clone().unwrap();
        let receipt = collector.submit_events(&party.credentials, &batch).map_err(|e| e.to_string())?;
        ensure!(
            receipt.accepted == fresh.len() && receipt.duplicates == 2 && receipt.rejected.len() == 1,
            "mixed batch receipt {receipt:?}"
        );
        ensure!(receipt.rejected[0].index == fresh.len(), "wrong rejected index {}", receipt.rejected[0].index);
        for doc in fresh {
            let id = doc["metrics"]["event_id"].as_str().unwrap().to_string();
            intent.insert((guid.clone(), id), doc);
        }
    }

    let collector = slot.read().unwrap().clone().unwrap();
    let stored = collector.store().scan_all(&ScanFilter::default()).map_err(|e| e.to_string())?;
    ensure!(stored.len() == intent.len(), "store holds {} records, intent has {}", stored.len(), intent.len());
    for record in &stored {
        let key = (record.envelope.agent.install_guid.to_string(), record.envelope.event_id().to_string());
        match intent.get(&key) {
            Some(doc) => ensure!(*doc == record.envelope.to_value(), "stored document differs for {key:?}"),
            None => return Err(format!("unexpected record {key:?}")),
        }
    }
    tally.intents += intent.len();

    // Restart, then replay every intent plus a conflicting rewrite.
    let store_root = collector.store().root().to_path_buf();
    drop(collector);
    let before = tree_bytes(&store_root);
    restart_collector(&slot, &config)?;
    let collector = slot.read().unwrap().clone().unwrap();
    for party in &parties {
        let mut docs: Vec<Value> = intent
            .iter()
            .filter(|((g, _), _)| *g == party.install.install_guid)
            .map(|(_, d)| d.clone())
            .collect();
        let mut rewrite = docs[0].clone();
        rewrite["metrics"]["note"] = json!("rewritten");
        docs.push(rewrite);
        for chunk in docs.chunks(1_000) {
            let receipt = collector.submit_events(&party.credentials, chunk).map_err(|e| e.to_string())?;
            ensure!(
                receipt.accepted == 0 && receipt.duplicates == chunk.len(),
                "replay after restart was not a pure duplicate: {receipt:?}"
            );
        }
    }
    drop(collector);
    *slot.write().unwrap() = None;
    ensure!(tree_bytes(&store_root) == before, "partition logs changed on replay");
    Ok(())
}

pub fn run() -> Check {
    let faults = Arc::new(AtomicUsize::new(0));
    let mut tally = Tally::default();
    for case in 0..CASES {
        one_case(0x1a6e_0000 + case, &faults, &mut tally).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!(
        "{CASES} cases, {} intended events, {} injected faults, {} restarts, {} mixed batches",
        tally.intents,
        faults.load(Ordering::Relaxed),
        tally.restarts,
        tally.raw_batches
    ))
}
