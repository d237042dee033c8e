//! Agent SDK: collection is separate from transfer.
//!
//! Collectors write envelopes into a local [`Buffer`]. A user (or a
//! schedule) reviews what was collected through [`ReviewFilter`]s and hands
//! selected ids to [`submit_selected`], which ships them through a
//! [`Transport`]. Delivery is at-least-once: anything whose fate is unknown
//! stays pending and is simply sent again, and the collector's dedup turns
//! the repeat into a no-op.

pub mod buffer;
pub mod local_http;
pub mod synthetic;
pub mod vcs;

use std::sync::Arc;

use serde_json::Value;

pub use buffer::{Buffer, BufferError, EventState, LocalEvent, ReviewFilter};

use crate::collector::client::{ClientError, CollectorClient};
use crate::collector::{Collector, CollectorError, Credentials, SubmitReceipt, MAX_BATCH};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    /// Outcome unknown; retrying is safe.
    #[error("transport failed: {0}")]
    Unreachable(String),
    #[error("collector refused the credentials")]
    Unauthorized,
    #[error("collector refused the request: {0}")]
    Refused(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Unreachable(_))
    }
}

/// Delivers one batch of raw envelope documents to a collector.
pub trait Transport: Send + Sync {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError>;
}

pub struct HttpTransport {
    client: CollectorClient,
    credentials: Credentials,
}

impl HttpTransport {
    pub fn new(client: CollectorClient, credentials: Credentials) -> Self {
        HttpTransport { client, credentials }
    }
}

impl Transport for HttpTransport {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        self.client.submit(&self.credentials, batch).map_err(|e| match e {
            ClientError::Unauthorized => TransportError::Unauthorized,
            ClientError::Transport(m) => TransportError::Unreachable(m),
            // 5xx: the batch may have been partly applied.
            ClientError::Server { status, body } if status >= 500 => {
                TransportError::Unreachable(format!("{status}: {body}"))
            }
            other => TransportError::Refused(other.to_string()),
        })
    }
}

/// Calls a collector living in the same process.
pub struct InProcessTransport {
    collector: Arc<Collector>,
    credentials: Credentials,
}

impl InProcessTransport {
    pub fn new(collector: Arc<Collector>, credentials: Credentials) -> Self {
        InProcessTransport { collector, credentials }
    }
}

impl Transport for InProcessTransport {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        self.collector
            .submit_events(&self.credentials, batch)
            .map_err(|e| match e {
                CollectorError::Unauthorized => TransportError::Unauthorized,
                CollectorError::Store(s) => TransportError::Unreachable(s.to_string()),
                other => TransportError::Refused(other.to_string()),
            })
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn submit(&self, batch: &[Value]) -> Result<SubmitReceipt, TransportError> {
        (**self).submit(batch)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    /// Some elements were rejected; they stay pending with the error attached.
    #[error("{} of {} events rejected", .0.rejected.len(), .0.total())]
    PartialRejection(SubmitReceipt),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

impl SubmitError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SubmitError::Transport(t) if t.is_retryable())
    }
}

/// Sends the selected pending events and records the outcome locally.
///
/// Accepted and duplicate elements become submitted; rejected ones stay
/// pending with the collector's reason attached. A transport failure leaves
/// the affected batch pending. Selections larger than one collector batch
/// are sent in consecutive batches, and batches before a failure keep their
/// outcome.
pub fn submit_selected<T: Transport + ?Sized>(buffer: &Buffer, ids: &[String], transport: &T) -> Result<SubmitReceipt, SubmitError> {
    let envelopes = buffer.pending_envelopes(ids)?;
    let mut total = SubmitReceipt::default();
    for (chunk_no, chunk) in envelopes.chunks(MAX_BATCH).enumerate() {
        let offset = chunk_no * MAX_BATCH;
        let docs: Vec<Value> = chunk.iter().map(|e| e.to_value()).collect();
        let receipt = transport.submit(&docs)?;
        if receipt.total() != chunk.len() {
            return Err(TransportError::Refused(format!(
                "receipt covers {} elements, batch had {}",
                receipt.total(),
                chunk.len()
            ))
            .into());
        }

        let mut rejected = vec![false; chunk.len()];
        for r in &receipt.rejected {
            if let Some(slot) = rejected.get_mut(r.index) {
                *slot = true;
            }
        }
        let submitted: Vec<String> = chunk
            .iter()
            .zip(&rejected)
            .filter(|(_, &r)| !r)
            .map(|(e, _)| e.event_id().to_string())
            .collect();
        buffer.mark_submitted(submitted)?;
        for r in &receipt.rejected {
            if let Some(e) = chunk.get(r.index) {
                buffer.mark_rejected(e.event_id().to_string(), r.error.to_string())?;
            }
        }

        total.accepted += receipt.accepted;
        total.duplicates += receipt.duplicates;
        total.rejected.extend(receipt.rejected.into_iter().map(|mut r| {
            r.index += offset;
            r
        }));
    }
    if total.rejected.is_empty() {
        Ok(total)
    } else {
        Err(SubmitError::PartialRejection(total))
    }
}
