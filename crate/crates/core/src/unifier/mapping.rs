//! Mapping specs, the path language, typed cells and [`project`].

use std::borrow::Cow;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envelope::{is_event_type_token, RecordId};
use crate::store::StoredRecord;
use crate::time::Timestamp;

pub const KEY_COLUMNS: [&str; 2] = ["install_guid", "event_id"];
const ROOTS: [&str; 3] = ["timestamp", "agent", "metrics"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad mapping: {0}")]
pub struct BadMapping(pub String);

/// `[a-z_][a-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z' | '_')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    String,
    Integer,
    Real,
    Boolean,
    Timestamp,
}

impl ColumnType {
    pub const ALL: [ColumnType; 5] = [
        ColumnType::String,
        ColumnType::Integer,
        ColumnType::Real,
        ColumnType::Boolean,
        ColumnType::Timestamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColumnType::String => "string",
            ColumnType::Integer => "integer",
            ColumnType::Real => "real",
            ColumnType::Boolean => "boolean",
            ColumnType::Timestamp => "timestamp",
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Step {
    Key(String),
    Index(usize),
}

/// Dot-separated keys with optional `[i]` list indices, rooted at the
/// envelope: `metrics.sample_metric_data[0]`, `agent.code_name`, `timestamp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnPath {
    text: String,
    steps: Vec<Step>,
}

impl ColumnPath {
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Resolves the path against a stored document. JSON `null` counts as
    /// absent.
    pub fn resolve<'a>(&self, record: &'a StoredRecord) -> Option<Cow<'a, Value>> {
        let e = &record.envelope;
        let (root, rest) = self.steps.split_first()?;
        let Step::Key(root) = root else { return None };
        let mut current: Cow<'a, Value> = match root.as_str() {
            "timestamp" => Cow::Owned(Value::String(e.timestamp.to_string())),
            "agent" => Cow::Owned(e.agent.to_value()),
            "metrics" => {
                // Walk the payload by reference to avoid copying it.
                let Some((Step::Key(first), tail)) = rest.split_first() else {
                    return rest.is_empty().then(|| Cow::Owned(Value::Object(e.metrics.as_map().clone())));
                };
                let mut v = e.metrics.get(first)?;
                for step in tail {
                    v = step_into(v, step)?;
                }
                return (!v.is_null()).then_some(Cow::Borrowed(v));
            }
            _ => return None,
        };
        for step in rest {
            current = Cow::Owned(step_into(&current, step)?.clone());
        }
        (!current.is_null()).then_some(current)
    }
}

fn step_into<'v>(v: &'v Value, step: &Step) -> Option<&'v Value> {
    match (step, v) {
        (Step::Key(k), Value::Object(m)) => m.get(k),
        (Step::Index(i), Value::Array(items)) => items.get(*i),
        _ => None,
    }
}

impl FromStr for ColumnPath {
    type Err = BadMapping;

    fn from_str(text: &str) -> Result<Self, BadMapping> {
        let bad = |why: &str| BadMapping(format!("path {text:?}: {why}"));
        if text.is_empty() {
            return Err(bad("empty"));
        }
        let mut steps = Vec::new();
        for segment in text.split('.') {
            let (key, mut indices) = match segment.find('[') {
                Some(i) => (&segment[..i], &segment[i..]),
                None => (segment, ""),
            };
            if key.is_empty() || key.contains(']') {
                return Err(bad("empty or malformed key"));
            }
            steps.push(Step::Key(key.to_string()));
            while !indices.is_empty() {
                let close = indices.find(']').ok_or_else(|| bad("unclosed ["))?;
                let index = indices[1..close].parse::<usize>().map_err(|_| bad("index must be a non-negative integer"))?;
                steps.push(Step::Index(index));
                indices = &indices[close + 1..];
                if !indices.is_empty() && !indices.starts_with('[') {
                    return Err(bad("unexpected text after ]"));
                }
            }
        }
        match &steps[0] {
            Step::Key(root) if ROOTS.contains(&root.as_str()) => {}
            _ => return Err(bad("must start with timestamp, agent or metrics")),
        }
        if matches!(steps.get(1), Some(Step::Key(k)) if k == "secret_key") && steps[0] == Step::Key("agent".into()) {
            return Err(bad("agent.secret_key cannot be projected"));
        }
        if steps == [Step::Key("agent".into())] {
            return Err(bad("agent as a whole would expose secret_key"));
        }
        Ok(ColumnPath { text: text.to_string(), steps })
    }
}

impl fmt::Display for ColumnPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for ColumnPath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for ColumnPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub path: ColumnPath,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    #[serde(default)]
    pub required: bool,
}

impl ColumnSpec {
    pub fn new(name: &str, path: &str, ty: ColumnType, required: bool) -> Result<Self, BadMapping> {
        Ok(ColumnSpec {
            name: name.to_string(),
            path: path.parse()?,
            ty,
            required,
        })
    }
}

/// One relational projection of one event type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    /// Checkpoint identity; defaults to the table name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub table: String,
    pub source_event_type: String,
    /// Always `[install_guid, event_id]`; accepted in files for clarity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_columns: Option<Vec<String>>,
    /// Always `quarantine`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_missing_required: Option<String>,
    pub columns: Vec<ColumnSpec>,
}

impl MappingSpec {
    pub fn new(table: &str, source_event_type: &str, columns: Vec<ColumnSpec>) -> Result<Self, BadMapping> {
        let spec = MappingSpec {
            id: None,
            table: table.to_string(),
            source_event_type: source_event_type.to_string(),
            key_columns: None,
            on_missing_required: None,
            columns,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self, BadMapping> {
        let spec: MappingSpec = toml::from_str(text).map_err(|e| BadMapping(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, BadMapping> {
        let text = std::fs::read_to_string(path).map_err(|e| BadMapping(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mapping serializes")
    }

    pub fn mapping_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.table)
    }

    pub fn quarantine_table(&self) -> String {
        format!("{}__quarantine", self.table)
    }

    pub fn validate(&self) -> Result<(), BadMapping> {
        let bad = |m: String| Err(BadMapping(m));
        if !is_identifier(&self.table) {
            return bad(format!("table {:?} must match [a-z_][a-z0-9_]*", self.table));
        }
        if self.table.ends_with("__quarantine") || self.table.starts_with("_checkpoints") {
            return bad(format!("table name {:?} is reserved", self.table));
        }
        if !is_identifier(self.mapping_id()) {
            return bad(format!("mapping id {:?} must match [a-z_][a-z0-9_]*", self.mapping_id()));
        }
        if !is_event_type_token(&self.source_event_type) {
            return bad(format!("source_event_type {:?} is not an event type token", self.source_event_type));
        }
        if let Some(keys) = &self.key_columns {
            if keys.iter().map(String::as_str).ne(KEY_COLUMNS) {
                return bad(format!("key_columns are fixed to {KEY_COLUMNS:?}"));
            }
        }
        if let Some(policy) = &self.on_missing_required {
            if policy != "quarantine" {
                return bad(format!("on_missing_required must be \"quarantine\", got {policy:?}"));
            }
        }
        if self.columns.is_empty() {
            return bad("at least one column is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.columns {
            if !is_identifier(&c.name) {
                return bad(format!("column {:?} must match [a-z_][a-z0-9_]*", c.name));
            }
            if KEY_COLUMNS.contains(&c.name.as_str()) {
                return bad(format!("column {:?} collides with a key column", c.name));
            }
            if !seen.insert(c.name.as_str()) {
                return bad(format!("duplicate column {:?}", c.name));
            }
        }
        Ok(())
    }

    pub fn table_schema(&self) -> TableSchema {
        TableSchema {
            name: self.table.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| ColumnDef { name: c.name.clone(), ty: c.ty })
                .collect(),
        }
    }

    pub fn quarantine_schema(&self) -> TableSchema {
        TableSchema {
            name: self.quarantine_table(),
            columns: vec![
                ColumnDef { name: "reason".into(), ty: ColumnType::String },
                ColumnDef { name: "raw_ref".into(), ty: ColumnType::String },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

/// Non-key columns of a table; the key `(install_guid, event_id)` is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Boolean(bool),
    String(String),
    Timestamp(Timestamp),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    pub fn to_json(&self) -> Value {
        match self {
            Cell::Null => Value::Null,
            Cell::Integer(i) => Value::from(*i),
            Cell::Real(r) => Value::from(*r),
            Cell::Boolean(b) => Value::Bool(*b),
            Cell::String(s) => Value::String(s.clone()),
            Cell::Timestamp(t) => Value::String(t.to_string()),
        }
    }

    /// Inverse of [`Cell::to_json`] for a column of type `ty`.
    pub fn from_json(ty: ColumnType, v: &Value) -> Option<Cell> {
        if v.is_null() {
            return Some(Cell::Null);
        }
        Some(match ty {
            ColumnType::Integer => Cell::Integer(v.as_i64()?),
            ColumnType::Real => Cell::Real(v.as_f64()?),
            ColumnType::Boolean => Cell::Boolean(v.as_bool()?),
            ColumnType::String => Cell::String(v.as_str()?.to_string()),
            ColumnType::Timestamp => Cell::Timestamp(Timestamp::parse_utc(v.as_str()?).ok()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub key: RecordId,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuarantineKind {
    MissingRequired,
    TypeMismatch { expected: ColumnType, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarantineReason {
    pub column: String,
    pub path: String,
    pub kind: QuarantineKind,
}

impl fmt::Display for QuarantineReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            QuarantineKind::MissingRequired => write!(f, "{}: missing required", self.path),
            QuarantineKind::TypeMismatch { expected, found } => {
                write!(f, "{}: type mismatch, expected {expected}, found {found}", self.path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Row(Row),
    Skip,
    Quarantine(QuarantineReason),
}

fn json_kind(v: &Value) -> String {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "real",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
    .to_string()
}

/// Applies the column coercions; `None` is a type mismatch.
pub fn coerce(ty: ColumnType, v: &Value) -> Option<Cell> {
    match (ty, v) {
        (ColumnType::String, Value::String(s)) => Some(Cell::String(s.clone())),
        (ColumnType::Integer, Value::Number(n)) => n.as_i64().map(Cell::Integer),
        (ColumnType::Real, Value::Number(n)) => n.as_f64().map(Cell::Real),
        (ColumnType::Boolean, Value::Bool(b)) => Some(Cell::Boolean(*b)),
        (ColumnType::Boolean, Value::String(s)) if s == "true" => Some(Cell::Boolean(true)),
        (ColumnType::Boolean, Value::String(s)) if s == "false" => Some(Cell::Boolean(false)),
        (ColumnType::Timestamp, Value::String(s)) => Timestamp::parse_any_offset(s).ok().map(Cell::Timestamp),
        _ => None,
    }
}

/// Projects one stored document. Optional columns that are absent or fail
/// coercion become null; a required one quarantines the document.
pub fn project(record: &StoredRecord, mapping: &MappingSpec) -> Projection {
    if record.envelope.event_type() != mapping.source_event_type {
        return Projection::Skip;
    }
    let mut cells = Vec::with_capacity(mapping.columns.len());
    for column in &mapping.columns {
        let quarantine = |kind| {
            Projection::Quarantine(QuarantineReason {
                column: column.name.clone(),
                path: column.path.to_string(),
                kind,
            })
        };
        let cell = match column.path.resolve(record) {
            None if column.required => return quarantine(QuarantineKind::MissingRequired),
            None => Cell::Null,
            Some(v) => match coerce(column.ty, &v) {
                Some(cell) => cell,
                None if column.required => {
                    return quarantine(QuarantineKind::TypeMismatch {
                        expected: column.ty,
                        found: json_kind(&v),
                    })
                }
                None => Cell::Null,
            },
        };
        cells.push(cell);
    }
    Projection::Row(Row {
        key: record.record_id(),
        cells,
    })
}

/// Reference to the raw document behind a quarantine row.
pub fn raw_ref(record: &StoredRecord) -> String {
    format!("{}#{}", record.partition, record.seq)
}
