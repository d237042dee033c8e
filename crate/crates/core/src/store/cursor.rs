use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PartitionKey;
use crate::envelope::parse_uuid_strict;

/// Resumable position in the global scan order.
///
/// The position names the next record a scan would consider: partition
/// `(day, install_guid)` and sequence number within it. The empty token is
/// the start of the store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cursor(Option<(PartitionKey, u64)>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad cursor token {0:?}")]
pub struct BadCursor(pub String);

impl Cursor {
    pub fn start() -> Self {
        Cursor(None)
    }

    pub fn at(partition: PartitionKey, seq: u64) -> Self {
        Cursor(Some((partition, seq)))
    }

    pub fn is_start(&self) -> bool {
        self.0.is_none()
    }

    pub fn position(&self) -> Option<(&PartitionKey, u64)> {
        self.0.as_ref().map(|(p, s)| (p, *s))
    }

    pub fn token(&self) -> String {
        match &self.0 {
            None => String::new(),
            Some((p, seq)) => {
                let raw = format!("v1|{}|{}|{}", p.day.format("%Y-%m-%d"), p.install_guid, seq);
                URL_SAFE_NO_PAD.encode(raw)
            }
        }
    }

    pub fn parse(token: &str) -> Result<Self, BadCursor> {
        let token = token.trim();
        if token.is_empty() {
            return Ok(Cursor::start());
        }
        let bad = || BadCursor(token.to_string());
        let raw = URL_SAFE_NO_PAD.decode(token).map_err(|_| bad())?;
        let raw = String::from_utf8(raw).map_err(|_| bad())?;
        let mut parts = raw.split('|');
        if parts.next() != Some("v1") {
            return Err(bad());
        }
        let day = parts
            .next()
            .and_then(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
            .ok_or_else(bad)?;
        let install_guid = parts.next().and_then(parse_uuid_strict).ok_or_else(bad)?;
        let seq = parts.next().and_then(|s| s.parse::<u64>().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Cursor::at(PartitionKey { day, install_guid }, seq))
    }
}

impl fmt::Display for Cursor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl FromStr for Cursor {
    type Err = BadCursor;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Cursor::parse(s)
    }
}

impl Serialize for Cursor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for Cursor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Cursor::parse(&s).map_err(serde::de::Error::custom)
    }
}
