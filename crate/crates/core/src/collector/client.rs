//! Blocking client for the collector routes. Do not call from inside an
//! async runtime.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::http::{HEADER_INSTALL_GUID, HEADER_SECRET_KEY};
use super::{Credentials, Health, Registration, SubmitReceipt};
use crate::analytics::{AggregateSeries, Dimension, TimeRange};
use crate::store::{Cursor, ScanFilter, ScanPage};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("batch too large")]
    BatchTooLarge,
    /// Connection failures and timeouts; the request may or may not have
    /// been applied.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server answered {status}: {body}")]
    Server { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

#[derive(Clone)]
pub struct CollectorClient {
    base: String,
    http: Client,
}

impl CollectorClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ClientError> {
        Self::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(CollectorClient {
            base: base_url.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn decode<T: DeserializeOwned>(response: Result<Response, reqwest::Error>) -> Result<T, ClientError> {
        let response = response.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response.bytes().map_err(|e| ClientError::Transport(e.to_string()))?;
        match status {
            s if s.is_success() => serde_json::from_slice(&body).map_err(|e| ClientError::Decode(e.to_string())),
            StatusCode::UNAUTHORIZED => Err(ClientError::Unauthorized),
            StatusCode::PAYLOAD_TOO_LARGE => Err(ClientError::BatchTooLarge),
            s => Err(ClientError::Server {
                status: s.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            }),
        }
    }

    pub fn register(&self, code_name: &str, full_name: &str, registration_key: Option<&str>) -> Result<Registration, ClientError> {
        let mut req = self
            .http
            .post(self.url("/api/v1/agents/register"))
            .json(&json!({ "code_name": code_name, "full_name": full_name }));
        if let Some(key) = registration_key {
            req = req.header(HEADER_SECRET_KEY, key);
        }
        Self::decode(req.send())
    }

    pub fn submit(&self, creds: &Credentials, batch: &[Value]) -> Result<SubmitReceipt, ClientError> {
        let req = self
            .http
            .post(self.url("/api/v1/events:batch"))
            .header(HEADER_SECRET_KEY, creds.secret_key.to_string())
            .header(HEADER_INSTALL_GUID, creds.install_guid.to_string())
            .json(batch);
        Self::decode(req.send())
    }

    pub fn pull(&self, reader_key: &str, cursor: &Cursor, limit: usize, filter: &ScanFilter) -> Result<ScanPage, ClientError> {
        let mut query: Vec<(&str, String)> = vec![("cursor", cursor.token()), ("limit", limit.to_string())];
        if let Some(g) = filter.install_guid {
            query.push(("install_guid", g.to_string()));
        }
        if let Some(t) = &filter.event_type {
            query.push(("event_type", t.clone()));
        }
        if let Some(t) = filter.from {
            query.push(("from", t.to_string()));
        }
        if let Some(t) = filter.to {
            query.push(("to", t.to_string()));
        }
        let req = self
            .http
            .get(self.url("/api/v1/events"))
            .header(HEADER_SECRET_KEY, reader_key)
            .query(&query);
        Self::decode(req.send())
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        Self::decode(self.http.get(self.url("/api/v1/health")).send())
    }

    pub fn stats(&self, reader_key: &str) -> Result<Value, ClientError> {
        Self::decode(
            self.http
                .get(self.url("/api/v1/stats"))
                .header(HEADER_SECRET_KEY, reader_key)
                .send(),
        )
    }

    pub fn over_time(&self, reader_key: &str, range: &TimeRange, event_type: Option<&str>) -> Result<AggregateSeries, ClientError> {
        let mut query = vec![("from", range.from.to_string()), ("to", range.to.to_string())];
        if let Some(t) = event_type {
            query.push(("event_type", t.to_string()));
        }
        Self::decode(
            self.http
                .get(self.url("/api/v1/analytics/over-time"))
                .header(HEADER_SECRET_KEY, reader_key)
                .query(&query)
                .send(),
        )
    }

    pub fn breakdown(&self, reader_key: &str, dimension: Dimension, range: &TimeRange) -> Result<AggregateSeries, ClientError> {
        let dimension = serde_json::to_value(dimension).expect("dimension serializes");
        let query = [
            ("dimension", dimension.as_str().unwrap_or_default().to_string()),
            ("from", range.from.to_string()),
            ("to", range.to.to_string()),
        ];
        Self::decode(
            self.http
                .get(self.url("/api/v1/analytics/breakdown"))
                .header(HEADER_SECRET_KEY, reader_key)
                .query(&query)
                .send(),
        )
    }
}
