//! Unifiers: pull stored documents page by page, project them through a
//! [`MappingSpec`] and upsert the rows into a [`Sink`].
//!
//! Rows are written before the checkpoint, and upserts are keyed, so a crash
//! between the two only causes the same page to be projected again.

pub mod mapping;
pub mod sink;

use serde::{Deserialize, Serialize};

pub use mapping::{
    coerce, project, BadMapping, Cell, ColumnDef, ColumnPath, ColumnSpec, ColumnType, MappingSpec, Projection,
    QuarantineKind, QuarantineReason, Row, TableSchema,
};
pub use sink::{FileSink, MemorySink, Sink, SinkError, Table};

use crate::collector::client::{ClientError, CollectorClient};
use crate::collector::{Collector, CollectorError};
use crate::store::{Cursor, ScanFilter, ScanPage, Store};

pub const DEFAULT_BATCH_LIMIT: usize = 1_000;

/// How far one mapping has consumed the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifyCheckpoint {
    pub mapping_id: String,
    pub cursor: Cursor,
    pub rows_emitted: u64,
    pub quarantined: u64,
}

impl UnifyCheckpoint {
    pub fn fresh(mapping_id: &str) -> Self {
        UnifyCheckpoint {
            mapping_id: mapping_id.to_string(),
            cursor: Cursor::start(),
            rows_emitted: 0,
            quarantined: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("source refused the reader key")]
    Unauthorized,
    #[error("source unavailable: {0}")]
    Unavailable(String),
}

/// The pull side of the collector API.
pub trait Source {
    fn pull(&self, cursor: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, SourceError>;
}

impl Source for Store {
    fn pull(&self, cursor: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, SourceError> {
        self.scan(cursor, limit, filter).map_err(|e| SourceError::Unavailable(e.to_string()))
    }
}

/// A collector in the same process, authenticated with the reader key.
pub struct CollectorSource<'a> {
    pub collector: &'a Collector,
    pub reader_key: String,
}

impl Source for CollectorSource<'_> {
    fn pull(&self, cursor: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, SourceError> {
        self.collector
            .pull_events(Some(&self.reader_key), cursor, limit, filter)
            .map_err(|e| match e {
                CollectorError::Unauthorized => SourceError::Unauthorized,
                other => SourceError::Unavailable(other.to_string()),
            })
    }
}

pub struct HttpSource {
    pub client: CollectorClient,
    pub reader_key: String,
}

impl Source for HttpSource {
    fn pull(&self, cursor: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, SourceError> {
        self.client
            .pull(&self.reader_key, cursor, limit, filter)
            .map_err(|e| match e {
                ClientError::Unauthorized => SourceError::Unauthorized,
                other => SourceError::Unavailable(other.to_string()),
            })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UnifyError {
    #[error(transparent)]
    BadMapping(#[from] BadMapping),
    #[error("sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error(transparent)]
    SchemaConflict(SinkError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

impl From<SinkError> for UnifyError {
    fn from(e: SinkError) -> Self {
        match e {
            SinkError::SchemaConflict { .. } => UnifyError::SchemaConflict(e),
            other => UnifyError::SinkUnavailable(other.to_string()),
        }
    }
}

/// What one page of work did. `scanned == rows + quarantined + skipped`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifyReport {
    pub checkpoint: UnifyCheckpoint,
    pub scanned: usize,
    pub rows: usize,
    pub quarantined: usize,
    pub skipped: usize,
    /// The page was not full, so the store had nothing further.
    pub caught_up: bool,
}

/// Processes one page from the mapping's checkpoint.
pub fn run_unify(mapping: &MappingSpec, source: &dyn Source, sink: &dyn Sink, batch_limit: usize) -> Result<UnifyReport, UnifyError> {
    mapping.validate()?;
    sink.create_table(&mapping.table_schema())?;
    sink.create_table(&mapping.quarantine_schema())?;
    let checkpoint = sink
        .load_checkpoint(mapping.mapping_id())?
        .unwrap_or_else(|| UnifyCheckpoint::fresh(mapping.mapping_id()));

    let filter = ScanFilter {
        event_type: Some(mapping.source_event_type.clone()),
        ..ScanFilter::default()
    };
    let page = source.pull(&checkpoint.cursor, batch_limit, &filter)?;

    let mut rows = Vec::new();
    let mut quarantine = Vec::new();
    let mut skipped = 0;
    for record in &page.records {
        match project(record, mapping) {
            Projection::Row(row) => rows.push(row),
            Projection::Skip => skipped += 1,
            Projection::Quarantine(reason) => quarantine.push(Row {
                key: record.record_id(),
                cells: vec![Cell::String(reason.to_string()), Cell::String(mapping::raw_ref(record))],
            }),
        }
    }
    sink.upsert_rows(&mapping.table, &rows)?;
    sink.upsert_rows(&mapping.quarantine_table(), &quarantine)?;

    let next = UnifyCheckpoint {
        mapping_id: checkpoint.mapping_id.clone(),
        cursor: page.next,
        rows_emitted: checkpoint.rows_emitted + rows.len() as u64,
        quarantined: checkpoint.quarantined + quarantine.len() as u64,
    };
    if next != checkpoint {
        sink.save_checkpoint(&next)?;
    }
    Ok(UnifyReport {
        checkpoint: next,
        scanned: page.records.len(),
        rows: rows.len(),
        quarantined: quarantine.len(),
        skipped,
        caught_up: page.records.len() < batch_limit,
    })
}

/// Runs pages until the store is drained; returns the summed report.
pub fn unify_until_caught_up(mapping: &MappingSpec, source: &dyn Source, sink: &dyn Sink, batch_limit: usize) -> Result<UnifyReport, UnifyError> {
    let mut total: Option<UnifyReport> = None;
    loop {
        let page = run_unify(mapping, source, sink, batch_limit)?;
        let caught_up = page.caught_up;
        total = Some(match total {
            None => page,
            Some(t) => UnifyReport {
                checkpoint: page.checkpoint,
                scanned: t.scanned + page.scanned,
                rows: t.rows + page.rows,
                quarantined: t.quarantined + page.quarantined,
                skipped: t.skipped + page.skipped,
                caught_up,
            },
        });
        if caught_up {
            return Ok(total.expect("at least one page ran"));
        }
    }
}
