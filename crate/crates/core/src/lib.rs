//! Non-invasive software measurement platform.
//!
//! Agents collect product and process events and push them, wrapped in a
//! fixed three-part [`envelope`], to the [`collector`]. The collector keeps
//! every document in an append-only, deduplicating [`store`]. Unifiers pull
//! raw documents back out through the same API and project them into
//! relational tables; the exporter writes those tables as CSV or ARFF and
//! [`analytics`] serves aggregate series to dashboards.

pub mod agent;
pub mod analytics;
pub mod canonical;
pub mod collector;
pub mod envelope;
pub mod exporter;
pub mod loadgen;
pub mod store;
pub mod time;
pub mod unifier;

pub use envelope::{validate_envelope, AgentDescriptor, MetricEnvelope, RecordId, ValidationError, ValidationIssue};
pub use time::Timestamp;
