//! The reference listing validates; each malformed variant is rejected with
//! the expected issue kind.

use devmetrics::envelope::{parse_document, validate_envelope, MAX_PAYLOAD_DEPTH};
use serde_json::{json, Value};

use crate::{ensure, Check};

const LISTING: &str = include_str!("../../../core/tests/fixtures/listing.json");

type Mutation = Box<dyn Fn(&mut Value)>;

fn remove(path: &'static [&'static str]) -> Mutation {
    Box::new(move |doc| {
        let (last, parents) = path.split_last().unwrap();
        let mut node = doc;
        for p in parents {
            node = node.get_mut(*p).unwrap();
        }
        node.as_object_mut().unwrap().remove(*last);
    })
}

fn set(path: &'static [&'static str], value: Value) -> Mutation {
    Box::new(move |doc| {
        let (last, parents) = path.split_last().unwrap();
        let mut node = doc;
        for p in parents {
            node = node.get_mut(*p).unwrap();
        }
        node.as_object_mut().unwrap().insert(last.to_string(), value.clone());
    })
}

fn malformed_cases() -> Vec<(&'static str, Mutation, &'static str)> {
    let deep = (0..MAX_PAYLOAD_DEPTH + 2).fold(json!(1), |inner, _| json!({ "n": inner }));
    let huge = "x".repeat(1024 * 1024 + 1);
    vec![
        ("no timestamp", remove(&["timestamp"]), "MissingField"),
        ("no agent", remove(&["agent"]), "MissingField"),
        ("no metrics", remove(&["metrics"]), "MissingField"),
        ("no code_name", remove(&["agent", "code_name"]), "MissingField"),
        ("no full_name", remove(&["agent", "full_name"]), "MissingField"),
        ("no secret_key", remove(&["agent", "secret_key"]), "MissingField"),
        ("no install_guid", remove(&["agent", "install_guid"]), "MissingField"),
        ("no event_id", remove(&["metrics", "event_id"]), "MissingReservedKey"),
        ("no event_type", remove(&["metrics", "event_type"]), "MissingReservedKey"),
        ("empty event_id", set(&["metrics", "event_id"], json!("")), "MissingReservedKey"),
        ("secret_key not a uuid", set(&["agent", "secret_key"], json!("not-a-uuid")), "BadUuid"),
        (
            "install_guid without hyphens",
            set(&["agent", "install_guid"], json!("2187b0116b9d4d868083dd09a0d73019")),
            "BadUuid",
        ),
        (
            "install_guid in braces",
            set(&["agent", "install_guid"], json!("{2187b011-6b9d-4d86-8083-dd09a0d73019}")),
            "BadUuid",
        ),
        (
            "secret_key with non-hex digit",
            set(&["agent", "secret_key"], json!("6a81d622-5e24-4d9e-adc0-e3f7f2d93acg")),
            "BadUuid",
        ),
        (
            "install_guid with trailing space",
            set(&["agent", "install_guid"], json!("2187b011-6b9d-4d86-8083-dd09a0d73019 ")),
            "BadUuid",
        ),
        (
            "secret_key as urn",
            set(&["agent", "secret_key"], json!("urn:uuid:6a81d622-5e24-4d9e-adc0-e3f7f2d93ac7")),
            "BadUuid",
        ),
        ("timestamp with space separator", set(&["timestamp"], json!("2016-11-15 13:25:43.511Z")), "BadTimestamp"),
        ("timestamp with offset", set(&["timestamp"], json!("2016-11-15T13:25:43.511+03:00")), "BadTimestamp"),
        ("timestamp without zone", set(&["timestamp"], json!("2016-11-15T13:25:43.511")), "BadTimestamp"),
        ("timestamp out of range", set(&["timestamp"], json!("2016-13-45T13:25:43.511Z")), "BadTimestamp"),
        ("timestamp as number", set(&["timestamp"], json!(1_479_216_343_511_i64)), "BadTimestamp"),
        ("timestamp empty", set(&["timestamp"], json!("")), "BadTimestamp"),
        ("extra top-level version", set(&["version"], json!(1)), "UnknownTopLevelField"),
        ("extra top-level Metrics", set(&["Metrics"], json!({})), "UnknownTopLevelField"),
        ("extra top-level id", set(&["id"], json!("abc")), "UnknownTopLevelField"),
        ("agent as string", set(&["agent"], json!("agent")), "InvalidField"),
        ("metrics as array", set(&["metrics"], json!([])), "InvalidField"),
        ("event_type not a token", set(&["metrics", "event_type"], json!("Web Browsing")), "InvalidField"),
        ("metrics too deep", set(&["metrics", "deep"], deep), "PayloadTooDeep"),
        ("metrics too large", set(&["metrics", "blob"], json!(huge)), "PayloadTooLarge"),
    ]
}

pub fn run() -> Check {
    let listing = parse_document(LISTING.as_bytes()).map_err(|e| format!("listing does not parse: {e}"))?;
    let envelope = validate_envelope(&listing).map_err(|e| format!("listing rejected: {e}"))?;
    ensure!(envelope.event_id() == "4a8acf6e7fbadc242de5b4f3", "listing event_id {}", envelope.event_id());
    ensure!(envelope.event_type() == "web-browsing", "listing event_type {}", envelope.event_type());
    ensure!(envelope.timestamp.to_string() == "2016-11-15T13:25:43.511Z", "listing timestamp {}", envelope.timestamp);

    let cases = malformed_cases();
    ensure!(cases.len() == 30, "expected 30 malformed cases, have {}", cases.len());
    for (name, mutate, kind) in &cases {
        let mut doc = listing.clone();
        mutate(&mut doc);
        match validate_envelope(&doc) {
            Ok(_) => return Err(format!("{name}: accepted")),
            Err(e) if !e.has(kind) => return Err(format!("{name}: expected {kind}, got {e}")),
            Err(_) => {}
        }
    }
    Ok(format!("listing valid, {} malformed documents rejected with the expected kind", cases.len()))
}
