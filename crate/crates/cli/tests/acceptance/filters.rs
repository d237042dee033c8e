//! Review filters over agent buffers and scan filters over the store agree
//! with naive predicates evaluated here over the generated documents.

use std::collections::HashSet;

use devmetrics::agent::{submit_selected, Buffer, EventState, ReviewFilter, Transport, TransportError};
use devmetrics::collector::SubmitReceipt;
use devmetrics::envelope::{parse_uuid_strict, validate_envelope};
use devmetrics::store::{ScanFilter, Store};
use devmetrics::time::Timestamp;
use rand::Rng;
use serde_json::{json, Value};

use crate::support::{rng, Install, TestRng, DAY_MS, EPOCH_MS, WORDS};
use crate::{ensure, Check};

const BUFFER_CASES: u64 = 200;
const STORE_CASES: u64 = 100;
const FILTERS_PER_CASE: usize = 3;
const APPLICATIONS: [&str; 3] = ["git", "browser", "ide"];

struct AcceptAll;

impl Transport for AcceptAll {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        Ok(SubmitReceipt { accepted: batch.len(), ..SubmitReceipt::default() })
    }
}

struct Generated {
    id: String,
    millis: i64,
    metrics: Value,
}

fn string_leaves(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| string_leaves(i, out)),
        Value::Object(map) => map.values().for_each(|i| string_leaves(i, out)),
        _ => {}
    }
}

fn word(rng: &mut TestRng) -> &'static str {
    WORDS[rng.random_range(0..WORDS.len())]
}

fn random_keyword(rng: &mut TestRng) -> String {
    let w = word(rng);
    match rng.random_range(0..5) {
        0 => w.to_uppercase(),
        1 => w.to_lowercase(),
        2 => {
            let chars: Vec<char> = w.chars().collect();
            let start = rng.random_range(0..chars.len());
            let end = rng.random_range(start + 1..=chars.len());
            chars[start..end].iter().collect()
        }
        3 => "no-such-text".into(),
        _ => w.to_string(),
    }
}

/// A bound taken from an event (to hit the inclusive/exclusive edge) or random.
fn random_bound(rng: &mut TestRng, instants: &[i64]) -> i64 {
    if !instants.is_empty() && rng.random_bool(0.5) {
        instants[rng.random_range(0..instants.len())]
    } else {
        EPOCH_MS + rng.random_range(0..3 * DAY_MS)
    }
}

fn buffer_case(case: u64) -> Result<usize, String> {
    let mut rng = rng(0xf117_0000 + case);
    let dir = tempfile::tempdir().unwrap();
    let buffer = Buffer::open(dir.path().join("buffer.log")).map_err(|e| e.to_string())?;
    let install = Install::random(&mut rng, 0);

    let mut events = Vec::new();
    for i in 0..rng.random_range(0..60) {
        let mut metrics = json!({
            "event_id": format!("f{i}"),
            "event_type": "activity",
            "title": word(&mut rng),
            "tags": [word(&mut rng), word(&mut rng)],
            "detail": { "note": word(&mut rng), "count": rng.random_range(0..100) },
        });
        match rng.random_range(0..5) {
            0 => {}
            1 => metrics["application"] = json!(5),
            _ => metrics["application"] = json!(APPLICATIONS[rng.random_range(0..3)]),
        }
        let millis = EPOCH_MS + rng.random_range(0..3 * DAY_MS);
        let envelope = validate_envelope(&install.document(millis, metrics.clone())).map_err(|e| e.to_string())?;
        buffer.record(envelope).map_err(|e| e.to_string())?;
        events.push(Generated { id: format!("f{i}"), millis, metrics });
    }
    let submitted: Vec<String> = events.iter().filter(|_| rng.random_bool(0.4)).map(|e| e.id.clone()).collect();
    if !submitted.is_empty() {
        submit_selected(&buffer, &submitted, &AcceptAll).map_err(|e| e.to_string())?;
    }
    let submitted: HashSet<String> = submitted.into_iter().collect();
    let instants: Vec<i64> = events.iter().map(|e| e.millis).collect();

    for _ in 0..FILTERS_PER_CASE {
        let keyword = rng.random_bool(0.4).then(|| random_keyword(&mut rng));
        let application = rng.random_bool(0.3).then(|| APPLICATIONS[rng.random_range(0..3)].to_string());
        let from = rng.random_bool(0.3).then(|| random_bound(&mut rng, &instants));
        let to = rng.random_bool(0.3).then(|| random_bound(&mut rng, &instants));
        let state = rng.random_bool(0.3).then(|| rng.random_bool(0.5));

        let mut expected: Vec<&str> = events
            .iter()
            .filter(|e| {
                let mut leaves = Vec::new();
                string_leaves(&e.metrics, &mut leaves);
                keyword.as_ref().is_none_or(|k| leaves.iter().any(|l| l.to_lowercase().contains(&k.to_lowercase())))
                    && application.as_ref().is_none_or(|a| e.metrics["application"] == json!(a))
                    && from.is_none_or(|f| e.millis >= f)
                    && to.is_none_or(|t| e.millis < t)
                    && state.is_none_or(|is_submitted| submitted.contains(&e.id) == is_submitted)
            })
            .map(|e| e.id.as_str())
            .collect();
        expected.sort_unstable();

        let filter = ReviewFilter {
            keyword: keyword.clone(),
            application: application.clone(),
            from: from.map(Timestamp::from_millis),
            to: to.map(Timestamp::from_millis),
            state: state.map(|s| if s { EventState::Submitted } else { EventState::Pending }),
        };
        let listed = buffer.list_events(&filter);
        let mut actual: Vec<&str> = listed.iter().map(|e| e.id()).collect();
        actual.sort_unstable();
        ensure!(actual == expected, "list_events({filter:?}) gave {actual:?}, expected {expected:?}");
    }
    Ok(events.len())
}

fn store_case(case: u64) -> Result<usize, String> {
    let mut rng = rng(0x5ca0_0000 + case);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).map_err(|e| e.to_string())?;
    let installs: Vec<Install> = (0..rng.random_range(1..=4)).map(|i| Install::random(&mut rng, i)).collect();
    let types = ["activity", "size", "defect"];

    let mut records = Vec::new();
    for i in 0..rng.random_range(0..300) {
        let install = &installs[rng.random_range(0..installs.len())];
        let event_type = types[rng.random_range(0..3)];
        let millis = EPOCH_MS + rng.random_range(0..3 * DAY_MS);
        let doc = install.document(millis, json!({ "event_id": format!("s{i}"), "event_type": event_type }));
        store
            .append(validate_envelope(&doc).map_err(|e| e.to_string())?, Timestamp::now())
            .map_err(|e| e.to_string())?;
        records.push((install.install_guid.clone(), event_type, format!("s{i}"), millis));
    }
    let instants: Vec<i64> = records.iter().map(|r| r.3).collect();

    for _ in 0..FILTERS_PER_CASE {
        let guid = rng.random_bool(0.4).then(|| installs[rng.random_range(0..installs.len())].install_guid.clone());
        let event_type = rng.random_bool(0.4).then(|| types[rng.random_range(0..3)]);
        let from = rng.random_bool(0.4).then(|| random_bound(&mut rng, &instants));
        let to = rng.random_bool(0.4).then(|| random_bound(&mut rng, &instants));

        let mut expected: Vec<&str> = records
            .iter()
            .filter(|(g, t, _, millis)| {
                guid.as_ref().is_none_or(|want| want == g)
                    && event_type.is_none_or(|want| want == *t)
                    && from.is_none_or(|f| *millis >= f)
                    && to.is_none_or(|u| *millis < u)
            })
            .map(|(_, _, id, _)| id.as_str())
            .collect();
        expected.sort_unstable();

        let filter = ScanFilter {
            install_guid: guid.as_deref().map(|g| parse_uuid_strict(g).unwrap()),
            event_type: event_type.map(str::to_string),
            from: from.map(Timestamp::from_millis),
            to: to.map(Timestamp::from_millis),
        };
        let scanned = store.scan_all(&filter).map_err(|e| e.to_string())?;
        let mut actual: Vec<&str> = scanned.iter().map(|r| r.envelope.event_id()).collect();
        actual.sort_unstable();
        ensure!(actual == expected, "scan({filter:?}) gave {} records, expected {}", actual.len(), expected.len());
    }
    Ok(records.len())
}

pub fn run() -> Check {
    let mut buffered = 0;
    for case in 0..BUFFER_CASES {
        buffered += buffer_case(case).map_err(|e| format!("buffer case {case}: {e}"))?;
    }
    let mut stored = 0;
    for case in 0..STORE_CASES {
        stored += store_case(case).map_err(|e| format!("store case {case}: {e}"))?;
    }
    Ok(format!(
        "{} cases ({BUFFER_CASES} buffers / {buffered} events, {STORE_CASES} stores / {stored} records), {FILTERS_PER_CASE} filters each",
        BUFFER_CASES + STORE_CASES
    ))
}
