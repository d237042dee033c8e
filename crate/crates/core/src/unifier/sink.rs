//! Relational sinks: where unified rows and checkpoints live.
//!
//! [`FileSink`] keeps one directory per sink:
//!
//! ```text
//! <root>/<table>.schema.json
//! <root>/<table>.rows.jsonl      one [install_guid, event_id, cells...] per line
//! <root>/_checkpoints/<id>.json  written by atomic rename
//! ```
//!
//! Row files are upsert logs: later lines win on read. A torn final line is
//! dropped on read and cut off before the next append.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::Value;

use super::mapping::{Cell, Row, TableSchema};
use super::UnifyCheckpoint;
use crate::envelope::{parse_uuid_strict, RecordId};

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("sink unavailable: {0}")]
    Unavailable(String),
    #[error("table {table} already exists with a different schema")]
    SchemaConflict { table: String },
    #[error("no table named {0}")]
    UnknownTable(String),
    #[error("table {table} is corrupt: {detail}")]
    Corrupt { table: String, detail: String },
    #[error("row for {table} has {got} cells, schema has {want}")]
    Arity { table: String, got: usize, want: usize },
}

impl From<std::io::Error> for SinkError {
    fn from(e: std::io::Error) -> Self {
        SinkError::Unavailable(e.to_string())
    }
}

/// A table read back from a sink, rows ordered by key.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: Vec<Row>,
}

pub trait Sink: Send + Sync {
    /// Idempotent for an identical schema.
    fn create_table(&self, schema: &TableSchema) -> Result<(), SinkError>;
    /// Last write per key wins.
    fn upsert_rows(&self, table: &str, rows: &[Row]) -> Result<(), SinkError>;
    fn read_table(&self, table: &str) -> Result<Table, SinkError>;
    fn tables(&self) -> Result<Vec<String>, SinkError>;
    fn load_checkpoint(&self, mapping_id: &str) -> Result<Option<UnifyCheckpoint>, SinkError>;
    fn save_checkpoint(&self, checkpoint: &UnifyCheckpoint) -> Result<(), SinkError>;
}

impl<S: Sink + ?Sized> Sink for Arc<S> {
    fn create_table(&self, schema: &TableSchema) -> Result<(), SinkError> {
        (**self).create_table(schema)
    }
    fn upsert_rows(&self, table: &str, rows: &[Row]) -> Result<(), SinkError> {
        (**self).upsert_rows(table, rows)
    }
    fn read_table(&self, table: &str) -> Result<Table, SinkError> {
        (**self).read_table(table)
    }
    fn tables(&self) -> Result<Vec<String>, SinkError> {
        (**self).tables()
    }
    fn load_checkpoint(&self, mapping_id: &str) -> Result<Option<UnifyCheckpoint>, SinkError> {
        (**self).load_checkpoint(mapping_id)
    }
    fn save_checkpoint(&self, checkpoint: &UnifyCheckpoint) -> Result<(), SinkError> {
        (**self).save_checkpoint(checkpoint)
    }
}

fn check_arity(schema: &TableSchema, rows: &[Row]) -> Result<(), SinkError> {
    match rows.iter().find(|r| r.cells.len() != schema.columns.len()) {
        Some(r) => Err(SinkError::Arity {
            table: schema.name.clone(),
            got: r.cells.len(),
            want: schema.columns.len(),
        }),
        None => Ok(()),
    }
}

#[derive(Default)]
struct MemoryState {
    tables: BTreeMap<String, (TableSchema, BTreeMap<RecordId, Vec<Cell>>)>,
    checkpoints: HashMap<String, UnifyCheckpoint>,
}

/// In-process sink for tests and embedding.
#[derive(Default)]
pub struct MemorySink {
    state: Mutex<MemoryState>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Sink for MemorySink {
    fn create_table(&self, schema: &TableSchema) -> Result<(), SinkError> {
        let mut state = self.state.lock();
        match state.tables.get(&schema.name) {
            Some((existing, _)) if existing != schema => Err(SinkError::SchemaConflict { table: schema.name.clone() }),
            Some(_) => Ok(()),
            None => {
                state.tables.insert(schema.name.clone(), (schema.clone(), BTreeMap::new()));
                Ok(())
            }
        }
    }

    fn upsert_rows(&self, table: &str, rows: &[Row]) -> Result<(), SinkError> {
        let mut state = self.state.lock();
        let (schema, data) = state.tables.get_mut(table).ok_or_else(|| SinkError::UnknownTable(table.into()))?;
        check_arity(schema, rows)?;
        for row in rows {
            data.insert(row.key.clone(), row.cells.clone());
        }
        Ok(())
    }

    fn read_table(&self, table: &str) -> Result<Table, SinkError> {
        let state = self.state.lock();
        let (schema, data) = state.tables.get(table).ok_or_else(|| SinkError::UnknownTable(table.into()))?;
        Ok(Table {
            schema: schema.clone(),
            rows: data
                .iter()
                .map(|(key, cells)| Row { key: key.clone(), cells: cells.clone() })
                .collect(),
        })
    }

    fn tables(&self) -> Result<Vec<String>, SinkError> {
        Ok(self.state.lock().tables.keys().cloned().collect())
    }

    fn load_checkpoint(&self, mapping_id: &str) -> Result<Option<UnifyCheckpoint>, SinkError> {
        Ok(self.state.lock().checkpoints.get(mapping_id).cloned())
    }

    fn save_checkpoint(&self, checkpoint: &UnifyCheckpoint) -> Result<(), SinkError> {
        self.state
            .lock()
            .checkpoints
            .insert(checkpoint.mapping_id.clone(), checkpoint.clone());
        Ok(())
    }
}

/// Directory-backed sink. Safe for concurrent writers to distinct tables,
/// including from separate processes.
pub struct FileSink {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl FileSink {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, SinkError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("_checkpoints"))?;
        Ok(FileSink { root, locks: Mutex::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self, table: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(table.to_string()).or_default().clone()
    }

    fn schema_path(&self, table: &str) -> PathBuf {
        self.root.join(format!("{table}.schema.json"))
    }

    fn rows_path(&self, table: &str) -> PathBuf {
        self.root.join(format!("{table}.rows.jsonl"))
    }

    fn checkpoint_path(&self, mapping_id: &str) -> PathBuf {
        self.root.join("_checkpoints").join(format!("{mapping_id}.json"))
    }

    fn read_schema(&self, table: &str) -> Result<Option<TableSchema>, SinkError> {
        match fs::read(self.schema_path(table)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| SinkError::Corrupt {
                table: table.into(),
                detail: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Persist the rename; not every platform allows opening directories.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

fn row_line(row: &Row) -> Vec<u8> {
    let mut items = Vec::with_capacity(row.cells.len() + 2);
    items.push(Value::String(row.key.install_guid.to_string()));
    items.push(Value::String(row.key.event_id.clone()));
    items.extend(row.cells.iter().map(Cell::to_json));
    let mut line = serde_json::to_vec(&Value::Array(items)).expect("row serializes");
    line.push(b'\n');
    line
}

fn parse_row(schema: &TableSchema, line: &[u8]) -> Result<Row, String> {
    let value: Value = serde_json::from_slice(line).map_err(|e| e.to_string())?;
    let items = value.as_array().ok_or("row is not an array")?;
    if items.len() != schema.columns.len() + 2 {
        return Err(format!("row has {} items", items.len()));
    }
    let install_guid = items[0].as_str().and_then(parse_uuid_strict).ok_or("bad install_guid")?;
    let event_id = items[1].as_str().ok_or("bad event_id")?.to_string();
    let cells = schema
        .columns
        .iter()
        .zip(&items[2..])
        .map(|(c, v)| Cell::from_json(c.ty, v).ok_or_else(|| format!("bad {} value for {}", c.ty, c.name)))
        .collect::<Result<_, _>>()?;
    Ok(Row {
        key: RecordId { install_guid, event_id },
        cells,
    })
}

impl Sink for FileSink {
    fn create_table(&self, schema: &TableSchema) -> Result<(), SinkError> {
        let lock = self.lock(&schema.name);
        let _guard = lock.lock();
        match self.read_schema(&schema.name)? {
            Some(existing) if existing != *schema => Err(SinkError::SchemaConflict { table: schema.name.clone() }),
            Some(_) => Ok(()),
            None => {
                let bytes = serde_json::to_vec_pretty(schema).expect("schema serializes");
                write_atomic(&self.schema_path(&schema.name), &bytes)?;
                Ok(())
            }
        }
    }

    fn upsert_rows(&self, table: &str, rows: &[Row]) -> Result<(), SinkError> {
        let lock = self.lock(table);
        let _guard = lock.lock();
        let schema = self.read_schema(table)?.ok_or_else(|| SinkError::UnknownTable(table.into()))?;
        check_arity(&schema, rows)?;
        if rows.is_empty() {
            return Ok(());
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(self.rows_path(table))?;
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                let mut contents = Vec::new();
                file.seek(SeekFrom::Start(0))?;
                file.read_to_end(&mut contents)?;
                let keep = contents.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64)?;
            }
        }
        let mut batch = Vec::new();
        for row in rows {
            batch.extend(row_line(row));
        }
        file.write_all(&batch)?;
        file.sync_data()?;
        Ok(())
    }

    fn read_table(&self, table: &str) -> Result<Table, SinkError> {
        let schema = self.read_schema(table)?.ok_or_else(|| SinkError::UnknownTable(table.into()))?;
        let bytes = match fs::read(self.rows_path(table)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut data = BTreeMap::new();
        for (n, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = parse_row(&schema, line).map_err(|detail| SinkError::Corrupt {
                table: table.into(),
                detail: format!("line {}: {detail}", n + 1),
            })?;
            data.insert(row.key, row.cells);
        }
        Ok(Table {
            schema,
            rows: data.into_iter().map(|(key, cells)| Row { key, cells }).collect(),
        })
    }

    fn tables(&self) -> Result<Vec<String>, SinkError> {
        let mut names: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                name.strip_suffix(".schema.json").map(str::to_string)
            })
            .collect();
        names.sort();
        Ok(names)
    }

    fn load_checkpoint(&self, mapping_id: &str) -> Result<Option<UnifyCheckpoint>, SinkError> {
        match fs::read(self.checkpoint_path(mapping_id)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| SinkError::Corrupt {
                table: "_checkpoints".into(),
                detail: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn save_checkpoint(&self, checkpoint: &UnifyCheckpoint) -> Result<(), SinkError> {
        let bytes = serde_json::to_vec_pretty(checkpoint).expect("checkpoint serializes");
        write_atomic(&self.checkpoint_path(&checkpoint.mapping_id), &bytes)?;
        Ok(())
    }
}
