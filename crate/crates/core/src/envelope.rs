//! The three-part document every agent submits: `timestamp`, `agent`, `metrics`.
//!
//! The top level is closed (exactly those three keys) and the `agent`
//! descriptor has a fixed shape. Inside `metrics` only `event_id` and
//! `event_type` are reserved; everything else belongs to the agent.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use uuid::Uuid;

use crate::canonical;
use crate::time::Timestamp;

pub const MAX_CODE_NAME_CHARS: usize = 64;
pub const MAX_EVENT_TYPE_CHARS: usize = 64;
pub const MAX_PAYLOAD_BYTES: usize = 1024 * 1024;
pub const MAX_PAYLOAD_DEPTH: usize = 32;

const TOP_LEVEL_FIELDS: [&str; 3] = ["timestamp", "agent", "metrics"];
const AGENT_FIELDS: [&str; 4] = ["code_name", "full_name", "secret_key", "install_guid"];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AgentDescriptor {
    pub code_name: String,
    pub full_name: String,
    pub secret_key: Uuid,
    pub install_guid: Uuid,
}

/// Agent-defined metrics tree carrying the reserved `event_id` and `event_type`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsPayload(Map<String, Value>);

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEnvelope {
    pub timestamp: Timestamp,
    pub agent: AgentDescriptor,
    pub metrics: MetricsPayload,
}

/// Store-wide identity of an event: `(install_guid, event_id)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordId {
    pub install_guid: Uuid,
    pub event_id: String,
}

/// One violated rule. A [`ValidationError`] carries every issue found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind")]
pub enum ValidationIssue {
    #[error("missing field {path}")]
    MissingField { path: String },
    #[error("bad timestamp {value:?}")]
    BadTimestamp { value: String },
    #[error("{field} is not a UUID")]
    BadUuid { field: String },
    #[error("metrics payload is {size} bytes, limit {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("metrics payload depth {depth} exceeds {limit}")]
    PayloadTooDeep { depth: usize, limit: usize },
    #[error("metrics.{key} is missing or empty")]
    MissingReservedKey { key: String },
    #[error("unknown top-level field {name}")]
    UnknownTopLevelField { name: String },
    #[error("{path}: {reason}")]
    InvalidField { path: String, reason: String },
    /// Raised by the collector when the envelope's credentials differ from
    /// the request's.
    #[error("envelope credentials do not match the request")]
    CredentialMismatch,
}

impl ValidationIssue {
    pub fn kind(&self) -> &'static str {
        match self {
            ValidationIssue::MissingField { .. } => "MissingField",
            ValidationIssue::BadTimestamp { .. } => "BadTimestamp",
            ValidationIssue::BadUuid { .. } => "BadUuid",
            ValidationIssue::PayloadTooLarge { .. } => "PayloadTooLarge",
            ValidationIssue::PayloadTooDeep { .. } => "PayloadTooDeep",
            ValidationIssue::MissingReservedKey { .. } => "MissingReservedKey",
            ValidationIssue::UnknownTopLevelField { .. } => "UnknownTopLevelField",
            ValidationIssue::InvalidField { .. } => "InvalidField",
            ValidationIssue::CredentialMismatch => "CredentialMismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationError {
    pub fn single(issue: ValidationIssue) -> Self {
        Self { issues: vec![issue] }
    }

    pub fn has(&self, kind: &str) -> bool {
        self.issues.iter().any(|i| i.kind() == kind)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Parses a wire document. Strict JSON is tried first; on failure, commas
/// directly before a closing `}` or `]` are dropped and parsing retried.
pub fn parse_document(bytes: &[u8]) -> Result<Value, serde_json::Error> {
    match serde_json::from_slice(bytes) {
        Ok(v) => Ok(v),
        Err(strict) => match strip_trailing_commas(bytes) {
            Some(relaxed) => serde_json::from_slice(&relaxed).map_err(|_| strict),
            None => Err(strict),
        },
    }
}

fn strip_trailing_commas(bytes: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut changed = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            out.push(b);
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                out.push(b);
            }
            b',' => {
                let next = bytes[i + 1..].iter().find(|c| !c.is_ascii_whitespace());
                if matches!(next, Some(b'}') | Some(b']')) {
                    changed = true;
                } else {
                    out.push(b);
                }
            }
            _ => out.push(b),
        }
    }
    changed.then_some(out)
}

/// Strict RFC 4122 text form: 8-4-4-4-12 hex digits.
pub fn parse_uuid_strict(s: &str) -> Option<Uuid> {
    let bytes = s.as_bytes();
    if bytes.len() != 36 {
        return None;
    }
    for (i, b) in bytes.iter().enumerate() {
        let ok = match i {
            8 | 13 | 18 | 23 => *b == b'-',
            _ => b.is_ascii_hexdigit(),
        };
        if !ok {
            return None;
        }
    }
    Uuid::parse_str(s).ok()
}

/// Lowercase token: ASCII lowercase letters, digits, `-`, `_`, `.`; starts
/// with a letter or digit.
pub fn is_event_type_token(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit() => {}
        _ => return false,
    }
    s.len() <= MAX_EVENT_TYPE_CHARS
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '-' | '_' | '.'))
}

pub fn check_code_name(s: &str) -> Result<(), String> {
    if s.is_empty() {
        return Err("must be non-empty".into());
    }
    if s.chars().count() > MAX_CODE_NAME_CHARS {
        return Err(format!("longer than {MAX_CODE_NAME_CHARS} characters"));
    }
    if s.chars().any(char::is_control) {
        return Err("contains control characters".into());
    }
    Ok(())
}

/// Checks every rule and returns either a typed envelope or all violations.
pub fn validate_envelope(raw: &Value) -> Result<MetricEnvelope, ValidationError> {
    let mut issues = Vec::new();
    let Some(top) = raw.as_object() else {
        return Err(ValidationError::single(ValidationIssue::InvalidField {
            path: "$".into(),
            reason: "document must be an object".into(),
        }));
    };

    for name in top.keys() {
        if !TOP_LEVEL_FIELDS.contains(&name.as_str()) {
            issues.push(ValidationIssue::UnknownTopLevelField { name: name.clone() });
        }
    }

    let timestamp = match top.get("timestamp") {
        None => {
            issues.push(ValidationIssue::MissingField { path: "timestamp".into() });
            None
        }
        Some(Value::String(s)) => match Timestamp::parse_utc(s) {
            Ok(t) => Some(t),
            Err(_) => {
                issues.push(ValidationIssue::BadTimestamp { value: s.clone() });
                None
            }
        },
        Some(other) => {
            issues.push(ValidationIssue::BadTimestamp { value: other.to_string() });
            None
        }
    };

    let agent = match top.get("agent") {
        None => {
            issues.push(ValidationIssue::MissingField { path: "agent".into() });
            None
        }
        Some(Value::Object(map)) => validate_agent(map, &mut issues),
        Some(_) => {
            issues.push(ValidationIssue::InvalidField {
                path: "agent".into(),
                reason: "must be an object".into(),
            });
            None
        }
    };

    let metrics = match top.get("metrics") {
        None => {
            issues.push(ValidationIssue::MissingField { path: "metrics".into() });
            None
        }
        Some(Value::Object(map)) => validate_metrics(map, &mut issues),
        Some(_) => {
            issues.push(ValidationIssue::InvalidField {
                path: "metrics".into(),
                reason: "must be an object".into(),
            });
            None
        }
    };

    match (timestamp, agent, metrics) {
        (Some(timestamp), Some(agent), Some(metrics)) if issues.is_empty() => Ok(MetricEnvelope {
            timestamp,
            agent,
            metrics,
        }),
        _ => Err(ValidationError { issues }),
    }
}

fn validate_agent(map: &Map<String, Value>, issues: &mut Vec<ValidationIssue>) -> Option<AgentDescriptor> {
    let before = issues.len();
    for name in map.keys() {
        if !AGENT_FIELDS.contains(&name.as_str()) {
            issues.push(ValidationIssue::InvalidField {
                path: format!("agent.{name}"),
                reason: "unknown agent field".into(),
            });
        }
    }

    let mut string_field = |name: &str| -> Option<&str> {
        match map.get(name) {
            None => {
                issues.push(ValidationIssue::MissingField { path: format!("agent.{name}") });
                None
            }
            Some(Value::String(s)) => Some(s.as_str()),
            Some(_) => {
                issues.push(ValidationIssue::InvalidField {
                    path: format!("agent.{name}"),
                    reason: "must be a string".into(),
                });
                None
            }
        }
    };
    let code_name = string_field("code_name");
    let full_name = string_field("full_name");
    let secret_key = string_field("secret_key");
    let install_guid = string_field("install_guid");

    if let Some(code_name) = code_name {
        if let Err(reason) = check_code_name(code_name) {
            issues.push(ValidationIssue::InvalidField { path: "agent.code_name".into(), reason });
        }
    }
    let secret_key = secret_key.and_then(|s| {
        let parsed = parse_uuid_strict(s);
        if parsed.is_none() {
            issues.push(ValidationIssue::BadUuid { field: "agent.secret_key".into() });
        }
        parsed
    });
    let install_guid = install_guid.and_then(|s| {
        let parsed = parse_uuid_strict(s);
        if parsed.is_none() {
            issues.push(ValidationIssue::BadUuid { field: "agent.install_guid".into() });
        }
        parsed
    });

    if issues.len() != before {
        return None;
    }
    Some(AgentDescriptor {
        code_name: code_name?.to_string(),
        full_name: full_name?.to_string(),
        secret_key: secret_key?,
        install_guid: install_guid?,
    })
}

fn validate_metrics(map: &Map<String, Value>, issues: &mut Vec<ValidationIssue>) -> Option<MetricsPayload> {
    let before = issues.len();

    match map.get("event_id") {
        None => issues.push(ValidationIssue::MissingReservedKey { key: "event_id".into() }),
        Some(Value::String(s)) if s.is_empty() => {
            issues.push(ValidationIssue::MissingReservedKey { key: "event_id".into() })
        }
        Some(Value::String(_)) => {}
        Some(_) => issues.push(ValidationIssue::InvalidField {
            path: "metrics.event_id".into(),
            reason: "must be a string".into(),
        }),
    }
    match map.get("event_type") {
        None => issues.push(ValidationIssue::MissingReservedKey { key: "event_type".into() }),
        Some(Value::String(s)) if s.is_empty() => {
            issues.push(ValidationIssue::MissingReservedKey { key: "event_type".into() })
        }
        Some(Value::String(s)) if !is_event_type_token(s) => issues.push(ValidationIssue::InvalidField {
            path: "metrics.event_type".into(),
            reason: "must be a lowercase token".into(),
        }),
        Some(Value::String(_)) => {}
        Some(_) => issues.push(ValidationIssue::InvalidField {
            path: "metrics.event_type".into(),
            reason: "must be a string".into(),
        }),
    }

    let as_value = Value::Object(map.clone());
    let depth = canonical::depth(&as_value);
    if depth > MAX_PAYLOAD_DEPTH {
        issues.push(ValidationIssue::PayloadTooDeep { depth, limit: MAX_PAYLOAD_DEPTH });
    } else {
        let size = canonical::to_canonical_vec(&as_value).len();
        if size > MAX_PAYLOAD_BYTES {
            issues.push(ValidationIssue::PayloadTooLarge { size, limit: MAX_PAYLOAD_BYTES });
        }
    }

    if issues.len() != before {
        return None;
    }
    match as_value {
        Value::Object(map) => Some(MetricsPayload(map)),
        _ => unreachable!(),
    }
}

impl MetricsPayload {
    pub fn event_id(&self) -> &str {
        self.0.get("event_id").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn event_type(&self) -> &str {
        self.0.get("event_type").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.0
    }

    /// `metrics.application`, when present as a string.
    pub fn application(&self) -> Option<&str> {
        self.0.get("application").and_then(Value::as_str)
    }

    /// `metrics.host.host_name`, when present as a string.
    pub fn host_name(&self) -> Option<&str> {
        self.0
            .get("host")
            .and_then(|h| h.get("host_name"))
            .and_then(Value::as_str)
    }

    /// Numeric `metrics.event_duration`, integer or real.
    pub fn event_duration(&self) -> Option<f64> {
        self.0.get("event_duration").and_then(Value::as_f64)
    }

    /// Visits every string leaf (not keys) of the tree.
    pub fn string_leaves(&self) -> Vec<&str> {
        fn walk<'a>(v: &'a Value, out: &mut Vec<&'a str>) {
            match v {
                Value::String(s) => out.push(s),
                Value::Array(items) => items.iter().for_each(|i| walk(i, out)),
                Value::Object(map) => map.values().for_each(|i| walk(i, out)),
                _ => {}
            }
        }
        let mut out = Vec::new();
        self.0.values().for_each(|v| walk(v, &mut out));
        out
    }
}

impl AgentDescriptor {
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("code_name".into(), Value::String(self.code_name.clone()));
        map.insert("full_name".into(), Value::String(self.full_name.clone()));
        map.insert("secret_key".into(), Value::String(self.secret_key.to_string()));
        map.insert("install_guid".into(), Value::String(self.install_guid.to_string()));
        Value::Object(map)
    }
}

impl MetricEnvelope {
    /// Builds an envelope from parts; the assembled document is validated.
    pub fn new(
        timestamp: Timestamp,
        agent: AgentDescriptor,
        metrics: Map<String, Value>,
    ) -> Result<Self, ValidationError> {
        let mut top = Map::new();
        top.insert("timestamp".into(), Value::String(timestamp.to_string()));
        top.insert("agent".into(), agent.to_value());
        top.insert("metrics".into(), Value::Object(metrics));
        validate_envelope(&Value::Object(top))
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, ValidationError> {
        let value = parse_document(bytes).map_err(|e| {
            ValidationError::single(ValidationIssue::InvalidField {
                path: "$".into(),
                reason: format!("not JSON: {e}"),
            })
        })?;
        validate_envelope(&value)
    }

    pub fn event_id(&self) -> &str {
        self.metrics.event_id()
    }

    pub fn event_type(&self) -> &str {
        self.metrics.event_type()
    }

    pub fn record_id(&self) -> RecordId {
        RecordId {
            install_guid: self.agent.install_guid,
            event_id: self.event_id().to_string(),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut top = Map::new();
        top.insert("timestamp".into(), Value::String(self.timestamp.to_string()));
        top.insert("agent".into(), self.agent.to_value());
        top.insert("metrics".into(), Value::Object(self.metrics.0.clone()));
        Value::Object(top)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_vec(&self.to_value())
    }
}

impl Serialize for MetricEnvelope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MetricEnvelope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        validate_envelope(&value).map_err(serde::de::Error::custom)
    }
}
