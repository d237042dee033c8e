//! CSV and ARFF writers for unified tables.
//!
//! Both are pure functions of the column definitions and rows. CSV follows
//! RFC 4180 quoting with LF line endings. ARFF maps integer and real to
//! `numeric`, string to `string`, boolean to the nominal `{true,false}` and
//! timestamp to an ISO date attribute.

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::unifier::{Cell, ColumnDef, ColumnType, Row, Sink, SinkError, Table};

pub const ARFF_DATE_FORMAT: &str = "yyyy-MM-dd'T'HH:mm:ss.SSS'Z'";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Arff,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "arff" => Ok(ExportFormat::Arff),
            other => Err(format!("unknown format {other:?}, expected csv or arff")),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Arff => "arff",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportRequest {
    pub table: String,
    pub format: ExportFormat,
    pub out: PathBuf,
    /// ARFF only; defaults to the table name.
    pub relation: Option<String>,
    /// Prepend the `install_guid` and `event_id` key columns.
    pub include_keys: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("export I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Column definitions and rows as they will be written, keys optionally
/// turned into leading string columns.
pub fn flatten(table: &Table, include_keys: bool) -> (Vec<ColumnDef>, Vec<Vec<Cell>>) {
    if !include_keys {
        return (
            table.schema.columns.clone(),
            table.rows.iter().map(|r| r.cells.clone()).collect(),
        );
    }
    let mut columns = vec![
        ColumnDef { name: "install_guid".into(), ty: ColumnType::String },
        ColumnDef { name: "event_id".into(), ty: ColumnType::String },
    ];
    columns.extend(table.schema.columns.iter().cloned());
    let rows = table
        .rows
        .iter()
        .map(|Row { key, cells }| {
            let mut out = vec![Cell::String(key.install_guid.to_string()), Cell::String(key.event_id.clone())];
            out.extend(cells.iter().cloned());
            out
        })
        .collect();
    (columns, rows)
}

fn plain_text(cell: &Cell) -> Option<String> {
    match cell {
        Cell::Null => None,
        Cell::Integer(i) => Some(i.to_string()),
        // Debug keeps a decimal point or exponent, so reals stay reals.
        Cell::Real(r) => Some(format!("{r:?}")),
        Cell::Boolean(b) => Some(b.to_string()),
        Cell::String(s) => Some(s.clone()),
        Cell::Timestamp(t) => Some(t.to_string()),
    }
}

fn csv_field(cell: &Cell) -> String {
    match cell {
        Cell::Null => String::new(),
        // Quoted so it differs from null.
        Cell::String(s) if s.is_empty() => "\"\"".into(),
        Cell::String(s) if s.contains([',', '"', '\n', '\r']) => format!("\"{}\"", s.replace('"', "\"\"")),
        other => plain_text(other).expect("non-null"),
    }
}

fn csv_name(name: &str) -> String {
    csv_field(&Cell::String(name.to_string()))
}

pub fn write_csv<'a, W: Write>(out: &mut W, columns: &[ColumnDef], rows: impl IntoIterator<Item = &'a [Cell]>) -> io::Result<usize> {
    let header: Vec<String> = columns.iter().map(|c| csv_name(&c.name)).collect();
    writeln!(out, "{}", header.join(","))?;
    let mut n = 0;
    for row in rows {
        let fields: Vec<String> = row.iter().map(csv_field).collect();
        writeln!(out, "{}", fields.join(","))?;
        n += 1;
    }
    Ok(n)
}

pub fn export_csv(columns: &[ColumnDef], rows: &[Vec<Cell>]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&mut out, columns, rows.iter().map(Vec::as_slice)).expect("writing to memory");
    out
}

fn arff_needs_quotes(s: &str) -> bool {
    s.is_empty()
        || s == "?"
        || s.chars()
            .any(|c| c.is_whitespace() || matches!(c, ',' | '\'' | '"' | '\\' | '%' | '{' | '}'))
}

fn arff_quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('\'');
    for c in s.chars() {
        match c {
            '\'' => q.push_str("\\'"),
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\r' => q.push_str("\\r"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('\'');
    q
}

fn arff_token(s: &str) -> String {
    if arff_needs_quotes(s) {
        arff_quote(s)
    } else {
        s.to_string()
    }
}

fn arff_type(ty: ColumnType) -> String {
    match ty {
        ColumnType::Integer | ColumnType::Real => "numeric".into(),
        ColumnType::String => "string".into(),
        ColumnType::Boolean => "{true,false}".into(),
        ColumnType::Timestamp => format!("date \"{ARFF_DATE_FORMAT}\""),
    }
}

pub fn write_arff<'a, W: Write>(
    out: &mut W,
    relation: &str,
    columns: &[ColumnDef],
    rows: impl IntoIterator<Item = &'a [Cell]>,
) -> io::Result<usize> {
    writeln!(out, "@relation {}", arff_token(relation))?;
    writeln!(out)?;
    for c in columns {
        writeln!(out, "@attribute {} {}", arff_token(&c.name), arff_type(c.ty))?;
    }
    writeln!(out)?;
    writeln!(out, "@data")?;
    let mut n = 0;
    for row in rows {
        let fields: Vec<String> = row
            .iter()
            .map(|cell| match cell {
                Cell::Null => "?".to_string(),
                Cell::String(s) => arff_token(s),
                other => plain_text(other).expect("non-null"),
            })
            .collect();
        writeln!(out, "{}", fields.join(","))?;
        n += 1;
    }
    Ok(n)
}

pub fn export_arff(relation: &str, columns: &[ColumnDef], rows: &[Vec<Cell>]) -> Vec<u8> {
    let mut out = Vec::new();
    write_arff(&mut out, relation, columns, rows.iter().map(Vec::as_slice)).expect("writing to memory");
    out
}

/// Reads the table from the sink and writes the file; returns the row count.
pub fn export_table(sink: &dyn Sink, request: &ExportRequest) -> Result<usize, ExportError> {
    let table = sink.read_table(&request.table)?;
    let (columns, rows) = flatten(&table, request.include_keys);
    let bytes = match request.format {
        ExportFormat::Csv => export_csv(&columns, &rows),
        ExportFormat::Arff => export_arff(request.relation.as_deref().unwrap_or(&request.table), &columns, &rows),
    };
    if let Some(parent) = request.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&request.out, bytes)?;
    Ok(rows.len())
}
