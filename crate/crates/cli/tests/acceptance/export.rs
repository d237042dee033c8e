//! Random tables over all five column types are exported through a sink.
//! A CSV reader written here must reproduce every cell, and the ARFF output
//! must pass a grammar check whose decoded data equals the table.

use devmetrics::envelope::{parse_uuid_strict, RecordId};
use devmetrics::exporter::{export_table, ExportFormat, ExportRequest, ARFF_DATE_FORMAT};
use devmetrics::time::Timestamp;
use devmetrics::unifier::{Cell, ColumnDef, ColumnType, MemorySink, Row, Sink, TableSchema};
use rand::Rng;

use crate::support::{rng, uuid_text, TestRng};
use crate::{ensure, Check};

const CASES: u64 = 200;
const TYPES: [ColumnType; 5] = [
    ColumnType::Integer,
    ColumnType::Real,
    ColumnType::Boolean,
    ColumnType::String,
    ColumnType::Timestamp,
];
const PIECES: [&str; 24] = [
    "", "plain", ",", "\"", "'", "\n", "\r\n", "\r", " ", "\t", "?", "\\", "%", "{", "}", "a,b", "say \"hi\"", "é", "x y",
    "null", "true", "123", "@data", "--",
];

fn random_string(rng: &mut TestRng) -> String {
    (0..rng.random_range(0..4)).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_cell(rng: &mut TestRng, ty: ColumnType) -> Cell {
    if rng.random_bool(0.2) {
        return Cell::Null;
    }
    match ty {
        ColumnType::Integer => match rng.random_range(0..5) {
            0 => Cell::Integer(i64::MIN),
            1 => Cell::Integer(i64::MAX),
            _ => Cell::Integer(rng.random_range(-1_000..1_000)),
        },
        ColumnType::Real => Cell::Real(match rng.random_range(0..6) {
            0 => 1e300,
            1 => -1.5e-300,
            2 => 0.1 + 0.2,
            3 => -0.0,
            4 => 42.0,
            _ => rng.random::<f64>() * 1e6 - 5e5,
        }),
        ColumnType::Boolean => Cell::Boolean(rng.random_bool(0.5)),
        ColumnType::String => Cell::String(random_string(rng)),
        ColumnType::Timestamp => Cell::Timestamp(Timestamp::from_millis(rng.random_range(0..4_000_000_000_000))),
    }
}

fn same_cell(a: &Cell, b: &Cell) -> bool {
    match (a, b) {
        (Cell::Real(x), Cell::Real(y)) => x.to_bits() == y.to_bits(),
        _ => a == b,
    }
}

fn same_rows(a: &[Vec<Cell>], b: &[Vec<Cell>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same_cell(p, q)))
}

#[derive(Debug)]
enum CsvField {
    Bare(String),
    Quoted(String),
}

/// RFC 4180 records with LF line ends; a bare CR is an error.
fn read_csv(text: &str) -> Result<Vec<Vec<CsvField>>, String> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut records = Vec::new();
    while i < chars.len() {
        let mut record = Vec::new();
        loop {
            if chars.get(i) == Some(&'"') {
                i += 1;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None => return Err("unterminated quoted field".into()),
                        Some('"') if chars.get(i + 1) == Some(&'"') => {
                            s.push('"');
                            i += 2;
                        }
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some(c) => {
                            s.push(*c);
                            i += 1;
                        }
                    }
                }
                record.push(CsvField::Quoted(s));
            } else {
                let start = i;
                while i < chars.len() && chars[i] != ',' && chars[i] != '\n' {
                    if matches!(chars[i], '"' | '\r') {
                        return Err(format!("{:?} in unquoted field", chars[i]));
                    }
                    i += 1;
                }
                record.push(CsvField::Bare(chars[start..i].iter().collect()));
            }
            match chars.get(i) {
                Some(',') => i += 1,
                Some('\n') => {
                    i += 1;
                    break;
                }
                None => return Err("last record lacks a line end".into()),
                Some(c) => return Err(format!("{c:?} after a quoted field")),
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn decode_csv(ty: ColumnType, field: &CsvField) -> Result<Cell, String> {
    let bad = |s: &str| format!("{s:?} is not a {ty:?}");
    match field {
        CsvField::Quoted(s) if ty == ColumnType::String => Ok(Cell::String(s.clone())),
        CsvField::Quoted(s) => Err(format!("quoted {s:?} in a {ty:?} column")),
        CsvField::Bare(s) if s.is_empty() => Ok(Cell::Null),
        CsvField::Bare(s) => match ty {
            ColumnType::Integer => s.parse().map(Cell::Integer).map_err(|_| bad(s)),
            ColumnType::Real => s.parse().map(Cell::Real).map_err(|_| bad(s)),
            ColumnType::Boolean => match s.as_str() {
                "true" => Ok(Cell::Boolean(true)),
                "false" => Ok(Cell::Boolean(false)),
                _ => Err(bad(s)),
            },
            ColumnType::String => Ok(Cell::String(s.clone())),
            ColumnType::Timestamp => Timestamp::parse_utc(s).map(Cell::Timestamp).map_err(|_| bad(s)),
        },
    }
}

fn check_csv(text: &str, columns: &[ColumnDef], rows: &[Vec<Cell>]) -> Result<(), String> {
    let records = read_csv(text)?;
    let (header, body) = records.split_first().ok_or("no header")?;
    let names: Vec<&str> = header
        .iter()
        .map(|f| match f {
            CsvField::Bare(s) | CsvField::Quoted(s) => s.as_str(),
        })
        .collect();
    let want: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
    ensure!(names == want, "header {names:?}, expected {want:?}");
    let mut decoded = Vec::with_capacity(body.len());
    for record in body {
        ensure!(record.len() == columns.len(), "record has {} fields, expected {}", record.len(), columns.len());
        decoded.push(
            record
                .iter()
                .zip(columns)
                .map(|(f, c)| decode_csv(c.ty, f))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    ensure!(same_rows(&decoded, rows), "decoded CSV differs from the table");
    Ok(())
}

#[derive(Debug, PartialEq)]
enum ArffToken {
    Missing,
    Bare(String),
    Quoted(String),
}

impl ArffToken {
    fn text(&self) -> Option<&str> {
        match self {
            ArffToken::Missing => None,
            ArffToken::Bare(s) | ArffToken::Quoted(s) => Some(s),
        }
    }
}

/// Splits one line into comma-separated tokens: quoted with `'` or `"` and
/// backslash escapes, or bare with no whitespace, quotes, braces or commas.
fn arff_tokens(line: &str) -> Result<Vec<ArffToken>, String> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    loop {
        while matches!(chars.get(i), Some(' ' | '\t')) {
            i += 1;
        }
        match chars.get(i) {
            Some(&q @ ('\'' | '"')) => {
                i += 1;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None => return Err(format!("unterminated quote in {line:?}")),
                        Some('\\') => {
                            s.push(match chars.get(i + 1) {
                                Some('\\') => '\\',
                                Some('\'') => '\'',
                                Some('"') => '"',
                                Some('n') => '\n',
                                Some('r') => '\r',
                                Some('t') => '\t',
                                other => return Err(format!("bad escape {other:?} in {line:?}")),
                            });
                            i += 2;
                        }
                        Some(&c) if c == q => {
                            i += 1;
                            break;
                        }
                        Some(&c) => {
                            s.push(c);
                            i += 1;
                        }
                    }
                }
                out.push(ArffToken::Quoted(s));
            }
            _ => {
                let start = i;
                while i < chars.len() && chars[i] != ',' {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect::<String>().trim().to_string();
                ensure!(!s.is_empty(), "empty bare token in {line:?}");
                ensure!(!s.starts_with('%'), "bare token starts a comment: {s:?}");
                ensure!(
                    !s.chars().any(|c| c.is_whitespace() || matches!(c, '\'' | '"' | '{' | '}')),
                    "bare token needs quoting: {s:?}"
                );
                out.push(if s == "?" { ArffToken::Missing } else { ArffToken::Bare(s) });
            }
        }
        while matches!(chars.get(i), Some(' ' | '\t')) {
            i += 1;
        }
        match chars.get(i) {
            None => return Ok(out),
            Some(',') => i += 1,
            Some(c) => return Err(format!("{c:?} after a token in {line:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ArffType {
    Numeric,
    Text,
    Nominal,
    Date,
}

fn parse_attribute_type(spec: &str) -> Result<ArffType, String> {
    let lower = spec.to_ascii_lowercase();
    match lower.as_str() {
        "numeric" | "real" | "integer" => Ok(ArffType::Numeric),
        "string" => Ok(ArffType::Text),
        "{true,false}" => Ok(ArffType::Nominal),
        _ if lower.starts_with("date ") => {
            let format = spec[5..].trim();
            ensure!(format == format!("\"{ARFF_DATE_FORMAT}\""), "unexpected date format {format}");
            Ok(ArffType::Date)
        }
        _ => Err(format!("unknown attribute type {spec:?}")),
    }
}

fn is_arff_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 24
        && b.iter().enumerate().all(|(i, c)| match i {
            4 | 7 => *c == b'-',
            10 => *c == b'T',
            13 | 16 => *c == b':',
            19 => *c == b'.',
            23 => *c == b'Z',
            _ => c.is_ascii_digit(),
        })
}

fn decode_arff(ty: ArffType, column: ColumnType, token: &ArffToken) -> Result<Cell, String> {
    let Some(text) = token.text() else { return Ok(Cell::Null) };
    let bad = || format!("{token:?} is not valid for {ty:?}");
    match ty {
        ArffType::Numeric => {
            ensure!(matches!(token, ArffToken::Bare(_)), "quoted numeric {token:?}");
            text.parse::<f64>().map_err(|_| bad())?;
            match column {
                ColumnType::Integer => text.parse().map(Cell::Integer).map_err(|_| bad()),
                _ => text.parse().map(Cell::Real).map_err(|_| bad()),
            }
        }
        ArffType::Nominal => match text {
            "true" => Ok(Cell::Boolean(true)),
            "false" => Ok(Cell::Boolean(false)),
            _ => Err(bad()),
        },
        ArffType::Text => Ok(Cell::String(text.to_string())),
        ArffType::Date => {
            ensure!(is_arff_date(text), "{text:?} does not match {ARFF_DATE_FORMAT}");
            Timestamp::parse_utc(text).map(Cell::Timestamp).map_err(|_| bad())
        }
    }
}

fn check_arff(text: &str, relation: &str, columns: &[ColumnDef], rows: &[Vec<Cell>]) -> Result<(), String> {
    ensure!(text.ends_with('\n'), "ARFF lacks a final line end");
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('%'));
    let head = lines.next().ok_or("empty ARFF")?;
    ensure!(head.to_ascii_lowercase().starts_with("@relation "), "first line {head:?}");
    let name = arff_tokens(&head[10..])?;
    ensure!(name.len() == 1 && name[0].text() == Some(relation), "relation {name:?}, expected {relation:?}");

    let mut attributes = Vec::new();
    loop {
        let line = lines.next().ok_or("no @data section")?;
        let lower = line.to_ascii_lowercase();
        if lower == "@data" {
            break;
        }
        ensure!(lower.starts_with("@attribute "), "unexpected header line {line:?}");
        let rest = line[11..].trim_start();
        // The name is the first token; the type is the remainder.
        let (name, spec) = if let Some(q @ ('\'' | '"')) = rest.chars().next() {
            let end = rest[1..].find(q).ok_or("unterminated attribute name")? + 2;
            (arff_tokens(&rest[..end])?, rest[end..].trim())
        } else {
            let end = rest.find([' ', '\t']).ok_or("attribute without type")?;
            (arff_tokens(&rest[..end])?, rest[end..].trim())
        };
        attributes.push((name, parse_attribute_type(spec)?));
    }
    ensure!(attributes.len() == columns.len(), "{} attributes for {} columns", attributes.len(), columns.len());
    for ((name, _), c) in attributes.iter().zip(columns) {
        ensure!(name.len() == 1 && name[0].text() == Some(c.name.as_str()), "attribute {name:?}, expected {}", c.name);
    }

    let mut decoded = Vec::new();
    for line in lines {
        let tokens = arff_tokens(line)?;
        ensure!(tokens.len() == columns.len(), "data line {line:?} has {} values", tokens.len());
        decoded.push(
            tokens
                .iter()
                .zip(&attributes)
                .zip(columns)
                .map(|((t, (_, ty)), c)| decode_arff(*ty, c.ty, t))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    ensure!(decoded.len() == rows.len(), "{} data lines for {} rows", decoded.len(), rows.len());
    ensure!(same_rows(&decoded, rows), "decoded ARFF differs from the table");
    Ok(())
}

fn one_case(case: u64) -> Result<usize, String> {
    let mut rng = rng(0xe4e0_0000 + case);
    let dir = tempfile::tempdir().unwrap();
    let width = rng.random_range(1..=5);
    let mut columns: Vec<ColumnDef> = (0..width)
        .map(|i| ColumnDef { name: format!("c{i}"), ty: TYPES[rng.random_range(0..TYPES.len())] })
        .collect();
    columns[0].ty = TYPES[case as usize % TYPES.len()];
    let schema = TableSchema { name: "tbl".into(), columns: columns.clone() };

    let mut keyed: Vec<(String, String, Vec<Cell>)> = (0..rng.random_range(0..30))
        .map(|j| {
            let cells = columns.iter().map(|c| random_cell(&mut rng, c.ty)).collect();
            (uuid_text(&mut rng), format!("k{j:03}"), cells)
        })
        .collect();
    let sink = MemorySink::new();
    sink.create_table(&schema).map_err(|e| e.to_string())?;
    let rows: Vec<Row> = keyed
        .iter()
        .map(|(guid, id, cells)| Row {
            key: RecordId { install_guid: parse_uuid_strict(guid).unwrap(), event_id: id.clone() },
            cells: cells.clone(),
        })
        .collect();
    sink.upsert_rows("tbl", &rows).map_err(|e| e.to_string())?;

    let include_keys = rng.random_bool(0.3);
    keyed.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let mut expected_columns = columns.clone();
    let expected_rows: Vec<Vec<Cell>> = keyed
        .into_iter()
        .map(|(guid, id, cells)| {
            if include_keys {
                [vec![Cell::String(guid), Cell::String(id)], cells].concat()
            } else {
                cells
            }
        })
        .collect();
    if include_keys {
        let keys = ["install_guid", "event_id"].map(|n| ColumnDef { name: n.into(), ty: ColumnType::String });
        expected_columns = [keys.to_vec(), expected_columns].concat();
    }

    let csv = dir.path().join("t.csv");
    let written = export_table(
        &sink,
        &ExportRequest { table: "tbl".into(), format: ExportFormat::Csv, out: csv.clone(), relation: None, include_keys },
    )
    .map_err(|e| e.to_string())?;
    ensure!(written == expected_rows.len(), "CSV wrote {written} rows, table has {}", expected_rows.len());
    let text = std::fs::read_to_string(&csv).unwrap();
    check_csv(&text, &expected_columns, &expected_rows).map_err(|e| format!("CSV: {e}\n{text}"))?;

    let relation = if rng.random_bool(0.5) { "tbl".to_string() } else { format!("run {case}, 'quoted'") };
    let arff = dir.path().join("t.arff");
    let written = export_table(
        &sink,
        &ExportRequest {
            table: "tbl".into(),
            format: ExportFormat::Arff,
            out: arff.clone(),
            relation: Some(relation.clone()),
            include_keys,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(written == expected_rows.len(), "ARFF wrote {written} rows, table has {}", expected_rows.len());
    let text = std::fs::read_to_string(&arff).unwrap();
    check_arff(&text, &relation, &expected_columns, &expected_rows).map_err(|e| format!("ARFF: {e}\n{text}"))?;
    Ok(expected_rows.len())
}

pub fn run() -> Check {
    let mut rows = 0;
    for case in 0..CASES {
        rows += one_case(case).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("{CASES} tables, {rows} rows reproduced from CSV and from grammar-checked ARFF"))
}
