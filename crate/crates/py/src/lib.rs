//! Python bindings for the metrics core. Documents cross the boundary as
//! Python dicts (or JSON text) and come back as dicts.

use std::path::PathBuf;

use devmetrics::agent::{Buffer, EventState, ReviewFilter};
use devmetrics::analytics::{self, Dimension, SeriesFilter, TimeRange};
use devmetrics::canonical::to_canonical_string;
use devmetrics::envelope::{parse_document, parse_uuid_strict, validate_envelope, MetricEnvelope};
use devmetrics::exporter::{export_arff, export_csv};
use devmetrics::store::{AppendOutcome, Cursor, ScanFilter, Store as CoreStore};
use devmetrics::time::Timestamp;
use devmetrics::unifier::{project as core_project, Cell, ColumnDef, ColumnType, MappingSpec, Projection};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde_json::Value;

create_exception!(devmetrics_py, InvalidEnvelope, PyValueError, "The document is not a valid metric envelope.");

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn os_error(e: impl ToString) -> PyErr {
    PyOSError::new_err(e.to_string())
}

/// JSON text is parsed leniently like agent uploads; anything else goes through `json.dumps`.
fn to_value(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if let Ok(text) = obj.cast::<PyString>() {
        return parse_document(text.to_str()?.as_bytes()).map_err(value_error);
    }
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_error)
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn envelope_of(obj: &Bound<'_, PyAny>) -> PyResult<MetricEnvelope> {
    validate_envelope(&to_value(obj)?).map_err(|e| InvalidEnvelope::new_err(e.to_string()))
}

fn timestamp(s: Option<&str>) -> PyResult<Option<Timestamp>> {
    s.map(|s| Timestamp::parse_utc(s).map_err(value_error)).transpose()
}

/// Validates a document and returns its normalized form.
#[pyfunction]
fn validate<'py>(py: Python<'py>, doc: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &envelope_of(doc)?.to_value())
}

/// Canonical JSON text: sorted keys, no insignificant whitespace.
#[pyfunction]
fn canonical(doc: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(to_canonical_string(&to_value(doc)?))
}

/// Append-only envelope store on disk.
#[pyclass(frozen)]
struct Store {
    inner: CoreStore,
}

#[pymethods]
impl Store {
    #[new]
    fn new(root: PathBuf) -> PyResult<Self> {
        Ok(Store { inner: CoreStore::open(root).map_err(os_error)? })
    }

    /// Returns `(record, fresh)`; a repeated `(install_guid, event_id)` yields the first record.
    fn append<'py>(&self, py: Python<'py>, doc: &Bound<'py, PyAny>) -> PyResult<(Bound<'py, PyAny>, bool)> {
        let (record, outcome) = self.inner.append(envelope_of(doc)?, Timestamp::now()).map_err(os_error)?;
        Ok((to_py(py, &record)?, outcome == AppendOutcome::Fresh))
    }

    /// One page in store order; returns `(records, next_cursor)`.
    #[pyo3(signature = (cursor=None, limit=1000, install_guid=None, event_type=None, since=None, until=None))]
    #[allow(clippy::too_many_arguments)]
    fn scan<'py>(
        &self,
        py: Python<'py>,
        cursor: Option<&str>,
        limit: usize,
        install_guid: Option<&str>,
        event_type: Option<String>,
        since: Option<&str>,
        until: Option<&str>,
    ) -> PyResult<(Bound<'py, PyAny>, String)> {
        let cursor = cursor.map(Cursor::parse).transpose().map_err(value_error)?.unwrap_or_else(Cursor::start);
        let filter = ScanFilter {
            install_guid: install_guid
                .map(|g| parse_uuid_strict(g).ok_or_else(|| value_error(format!("bad install_guid {g:?}"))))
                .transpose()?,
            event_type,
            from: timestamp(since)?,
            to: timestamp(until)?,
        };
        let page = self.inner.scan(&cursor, limit, &filter).map_err(value_error)?;
        Ok((to_py(py, &page.records)?, page.next.token()))
    }

    fn record_count(&self) -> u64 {
        self.inner.record_count()
    }

    /// Daily counts over `[since, until)`, optionally for one event type.
    #[pyo3(signature = (since, until, event_type=None))]
    fn events_over_time<'py>(
        &self,
        py: Python<'py>,
        since: &str,
        until: &str,
        event_type: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let range = range(since, until)?;
        let filter = SeriesFilter { event_type, ..SeriesFilter::default() };
        to_py(py, &analytics::events_over_time(&self.inner, &range, &filter).map_err(value_error)?)
    }

    /// Counts grouped by `day`, `event_type`, `application` or `host`.
    fn breakdown<'py>(&self, py: Python<'py>, dimension: &str, since: &str, until: &str) -> PyResult<Bound<'py, PyAny>> {
        let dimension: Dimension = dimension.parse().map_err(value_error)?;
        let range = range(since, until)?;
        to_py(py, &analytics::breakdown(&self.inner, dimension, &range).map_err(value_error)?)
    }
}

fn range(since: &str, until: &str) -> PyResult<TimeRange> {
    let from = Timestamp::parse_utc(since).map_err(value_error)?;
    let to = Timestamp::parse_utc(until).map_err(value_error)?;
    TimeRange::new(from, to).map_err(value_error)
}

/// An agent's local event buffer.
#[pyclass(frozen)]
struct AgentBuffer {
    inner: Buffer,
}

#[pymethods]
impl AgentBuffer {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(AgentBuffer { inner: Buffer::open(path).map_err(os_error)? })
    }

    fn record<'py>(&self, py: Python<'py>, doc: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.record(envelope_of(doc)?).map_err(value_error)?)
    }

    #[pyo3(signature = (keyword=None, application=None, since=None, until=None, state=None))]
    fn list_events<'py>(
        &self,
        py: Python<'py>,
        keyword: Option<String>,
        application: Option<String>,
        since: Option<&str>,
        until: Option<&str>,
        state: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let filter = ReviewFilter {
            keyword,
            application,
            from: timestamp(since)?,
            to: timestamp(until)?,
            state: state.map(str::parse::<EventState>).transpose().map_err(value_error)?,
        };
        to_py(py, &self.inner.list_events(&filter))
    }

    fn pending_ids(&self) -> Vec<String> {
        self.inner.pending_ids()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Projects one envelope through a TOML mapping. Returns
/// `{"row": {...}}`, `{"quarantine": reason}` or `{"skip": True}`.
#[pyfunction]
fn project<'py>(py: Python<'py>, doc: &Bound<'py, PyAny>, mapping_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let mapping = MappingSpec::from_toml(mapping_toml).map_err(value_error)?;
    let envelope = envelope_of(doc)?;
    let record = devmetrics::store::StoredRecord {
        partition: devmetrics::store::PartitionKey::for_envelope(&envelope),
        received_at: envelope.timestamp,
        seq: 0,
        envelope,
    };
    let out = match core_project(&record, &mapping) {
        Projection::Row(row) => {
            let cells = mapping.columns.iter().zip(&row.cells).map(|(c, cell)| (c.name.clone(), cell.to_json()));
            serde_json::json!({ "row": cells.collect::<serde_json::Map<_, _>>() })
        }
        Projection::Quarantine(reason) => serde_json::json!({ "quarantine": reason.to_string() }),
        Projection::Skip => serde_json::json!({ "skip": true }),
    };
    to_py(py, &out)
}

fn table(columns: Vec<(String, String)>, rows: &Bound<'_, PyAny>) -> PyResult<(Vec<ColumnDef>, Vec<Vec<Cell>>)> {
    let defs = columns
        .into_iter()
        .map(|(name, ty)| {
            let ty: ColumnType = serde_json::from_value(Value::String(ty.clone()))
                .map_err(|_| value_error(format!("unknown column type {ty:?}")))?;
            Ok(ColumnDef { name, ty })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let Value::Array(raw_rows) = to_value(rows)? else {
        return Err(value_error("rows must be a list of lists"));
    };
    let cells = raw_rows
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let values = raw.as_array().filter(|v| v.len() == defs.len()).ok_or_else(|| {
                value_error(format!("row {i} must be a list of {} values", defs.len()))
            })?;
            defs.iter()
                .zip(values)
                .map(|(def, v)| {
                    Cell::from_json(def.ty, v).ok_or_else(|| value_error(format!("row {i}: {v} is not a {}", def.ty)))
                })
                .collect()
        })
        .collect::<PyResult<Vec<Vec<Cell>>>>()?;
    Ok((defs, cells))
}

/// CSV text for `columns` as `(name, type)` pairs and rows of plain values.
#[pyfunction]
fn to_csv(columns: Vec<(String, String)>, rows: &Bound<'_, PyAny>) -> PyResult<String> {
    let (defs, cells) = table(columns, rows)?;
    String::from_utf8(export_csv(&defs, &cells)).map_err(value_error)
}

/// ARFF text for `columns` as `(name, type)` pairs and rows of plain values.
#[pyfunction]
fn to_arff(relation: &str, columns: Vec<(String, String)>, rows: &Bound<'_, PyAny>) -> PyResult<String> {
    let (defs, cells) = table(columns, rows)?;
    String::from_utf8(export_arff(relation, &defs, &cells)).map_err(value_error)
}

#[pymodule]
fn devmetrics_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InvalidEnvelope", m.py().get_type::<InvalidEnvelope>())?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(canonical, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(to_csv, m)?)?;
    m.add_function(wrap_pyfunction!(to_arff, m)?)?;
    m.add_class::<Store>()?;
    m.add_class::<AgentBuffer>()?;
    Ok(())
}
