//! Aggregate series for dashboards, computed from raw-store scans so they
//! work before any mapping exists. All day boundaries are UTC.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::store::{ScanFilter, Store, StoreError, StoredRecord};
use crate::time::Timestamp;

/// Label for documents that lack the grouped path.
pub const NONE_LABEL: &str = "(none)";
pub const MAX_RANGE_DAYS: u64 = 3_660;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Day,
    EventType,
    Application,
    Host,
}

impl std::str::FromStr for Dimension {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "day" => Ok(Dimension::Day),
            "event_type" => Ok(Dimension::EventType),
            "application" => Ok(Dimension::Application),
            "host" => Ok(Dimension::Host),
            other => Err(AnalyticsError::BadDimension(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub count: u64,
    pub total_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub dimension: Dimension,
    pub buckets: Vec<Bucket>,
}

impl AggregateSeries {
    pub fn total_count(&self) -> u64 {
        self.buckets.iter().map(|b| b.count).sum()
    }
}

/// Half-open `[from, to)` over envelope timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl TimeRange {
    pub fn new(from: Timestamp, to: Timestamp) -> Result<Self, AnalyticsError> {
        if to <= from {
            return Err(AnalyticsError::BadRange(format!("{to} is not after {from}")));
        }
        let range = TimeRange { from, to };
        let days = range.days().len() as u64;
        if days > MAX_RANGE_DAYS {
            return Err(AnalyticsError::BadRange(format!("{days} days exceeds {MAX_RANGE_DAYS}")));
        }
        Ok(range)
    }

    /// Every UTC day intersecting the range.
    pub fn days(&self) -> Vec<NaiveDate> {
        let first = self.from.day();
        let last = Timestamp::from_millis(self.to.as_millis() - 1).day();
        let mut out = Vec::new();
        let mut day = first;
        while day <= last {
            out.push(day);
            day = day + Days::new(1);
        }
        out
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.from && t < self.to
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("unknown dimension {0:?}")]
    BadDimension(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesFilter {
    pub install_guid: Option<Uuid>,
    pub event_type: Option<String>,
}

fn day_label(day: NaiveDate) -> String {
    day.format("%Y-%m-%d").to_string()
}

/// Label of a record along `dimension`.
pub fn label_of(record: &StoredRecord, dimension: Dimension) -> String {
    let m = &record.envelope.metrics;
    match dimension {
        Dimension::Day => day_label(record.envelope.timestamp.day()),
        Dimension::EventType => m.event_type().to_string(),
        Dimension::Application => m.application().unwrap_or(NONE_LABEL).to_string(),
        Dimension::Host => m.host_name().unwrap_or(NONE_LABEL).to_string(),
    }
}

fn accumulate<'a>(
    records: impl IntoIterator<Item = &'a StoredRecord>,
    dimension: Dimension,
    buckets: &mut BTreeMap<String, (u64, f64)>,
) {
    for r in records {
        let entry = buckets.entry(label_of(r, dimension)).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += r.envelope.metrics.event_duration().unwrap_or(0.0);
    }
}

fn into_series(dimension: Dimension, buckets: BTreeMap<String, (u64, f64)>) -> AggregateSeries {
    AggregateSeries {
        dimension,
        buckets: buckets
            .into_iter()
            .map(|(label, (count, total_duration_s))| Bucket { label, count, total_duration_s })
            .collect(),
    }
}

/// Per-day counts over records already restricted to `range`; every day of
/// the range gets a bucket.
pub fn series_over_time<'a>(records: impl IntoIterator<Item = &'a StoredRecord>, range: &TimeRange) -> AggregateSeries {
    let mut buckets: BTreeMap<String, (u64, f64)> = range.days().into_iter().map(|d| (day_label(d), (0, 0.0))).collect();
    accumulate(records.into_iter().filter(|r| range.contains(r.envelope.timestamp)), Dimension::Day, &mut buckets);
    into_series(Dimension::Day, buckets)
}

pub fn series_breakdown<'a>(
    records: impl IntoIterator<Item = &'a StoredRecord>,
    dimension: Dimension,
    range: &TimeRange,
) -> AggregateSeries {
    let mut buckets = BTreeMap::new();
    accumulate(records.into_iter().filter(|r| range.contains(r.envelope.timestamp)), dimension, &mut buckets);
    into_series(dimension, buckets)
}

pub fn events_over_time(store: &Store, range: &TimeRange, filter: &SeriesFilter) -> Result<AggregateSeries, AnalyticsError> {
    let scan = ScanFilter {
        install_guid: filter.install_guid,
        event_type: filter.event_type.clone(),
        from: Some(range.from),
        to: Some(range.to),
    };
    let records = store.scan_all(&scan)?;
    Ok(series_over_time(&records, range))
}

pub fn breakdown(store: &Store, dimension: Dimension, range: &TimeRange) -> Result<AggregateSeries, AnalyticsError> {
    if dimension == Dimension::Day {
        return Err(AnalyticsError::BadDimension("day".into()));
    }
    let scan = ScanFilter {
        from: Some(range.from),
        to: Some(range.to),
        ..Default::default()
    };
    let records = store.scan_all(&scan)?;
    Ok(series_breakdown(&records, dimension, range))
}
