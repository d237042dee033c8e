//! Deterministic synthetic agents for load modelling.
//!
//! `agents` installs each emit `rate_per_s` events per second for
//! `duration_s` seconds on a fixed schedule, so a profile always yields
//! exactly `agents * rate_per_s * duration_s` envelopes. Event types follow
//! the activity / size / defect sensor taxonomy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use uuid::Builder;

use crate::envelope::{AgentDescriptor, MetricEnvelope};
use crate::time::Timestamp;

pub const EVENT_TYPES: [&str; 3] = ["activity", "size", "defect"];
const APPLICATIONS: [&str; 5] = ["editor", "browser", "terminal", "ide", "mail"];
const FILES: [&str; 6] = ["src/main.rs", "src/lib.rs", "README.md", "build.gradle", "app.py", "index.ts"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub agents: u32,
    pub rate_per_s: u32,
    pub duration_s: u32,
    pub seed: u64,
    /// Timestamp of the first scheduled event.
    pub start: Timestamp,
}

impl SyntheticProfile {
    pub fn total_events(&self) -> u64 {
        self.agents as u64 * self.rate_per_s as u64 * self.duration_s as u64
    }

    /// Descriptors for the profile's installs, derived from the seed.
    pub fn descriptors(&self) -> Vec<AgentDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_a6e7);
        (0..self.agents)
            .map(|i| AgentDescriptor {
                code_name: format!("synthetic-{i}"),
                full_name: "Synthetic load agent".into(),
                secret_key: Builder::from_random_bytes(rng.random()).into_uuid(),
                install_guid: Builder::from_random_bytes(rng.random()).into_uuid(),
            })
            .collect()
    }

    /// The stream for the seed-derived descriptors.
    pub fn stream(&self) -> SyntheticStream {
        let descriptors = self.descriptors();
        self.stream_for(descriptors)
    }

    /// The stream with caller-supplied descriptors (e.g. ones registered with
    /// a live collector). Panics if fewer than `agents` are given.
    pub fn stream_for(&self, descriptors: Vec<AgentDescriptor>) -> SyntheticStream {
        assert!(descriptors.len() >= self.agents as usize, "one descriptor per synthetic agent");
        SyntheticStream {
            profile: self.clone(),
            descriptors,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            slot: 0,
        }
    }
}

/// Envelopes in schedule order: per second, per sub-second slot, per agent.
pub struct SyntheticStream {
    profile: SyntheticProfile,
    descriptors: Vec<AgentDescriptor>,
    rng: ChaCha8Rng,
    slot: u64,
}

impl SyntheticStream {
    /// Index of the agent that produces the next envelope.
    pub fn next_agent(&self) -> usize {
        (self.slot % self.profile.agents.max(1) as u64) as usize
    }
}

impl Iterator for SyntheticStream {
    type Item = MetricEnvelope;

    fn next(&mut self) -> Option<MetricEnvelope> {
        let p = &self.profile;
        if self.slot >= p.total_events() {
            return None;
        }
        let agents = p.agents as u64;
        let rate = p.rate_per_s as u64;
        let agent = (self.slot % agents) as usize;
        let tick = self.slot / agents;
        let (second, sub) = (tick / rate, tick % rate);
        let offset_ms = second * 1000 + sub * 1000 / rate;
        let timestamp = Timestamp::from_millis(p.start.as_millis() + offset_ms as i64);
        let event_type = EVENT_TYPES[self.rng.random_range(0..EVENT_TYPES.len())];

        let mut metrics = Map::new();
        metrics.insert("event_id".into(), json!(format!("syn-{:016x}-{agent}-{tick}", p.seed)));
        metrics.insert("event_type".into(), json!(event_type));
        metrics.insert("host".into(), json!({ "host_name": format!("synthetic-host-{agent}") }));
        for (k, v) in payload(event_type, &mut self.rng) {
            metrics.insert(k, v);
        }
        self.slot += 1;
        let envelope = MetricEnvelope::new(timestamp, self.descriptors[agent].clone(), metrics)
            .expect("synthetic envelopes are valid by construction");
        Some(envelope)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.profile.total_events() - self.slot) as usize;
        (left, Some(left))
    }
}

fn payload(event_type: &str, rng: &mut ChaCha8Rng) -> Map<String, Value> {
    let mut m = Map::new();
    let file = FILES[rng.random_range(0..FILES.len())];
    match event_type {
        "activity" => {
            m.insert("application".into(), json!(APPLICATIONS[rng.random_range(0..APPLICATIONS.len())]));
            m.insert("file".into(), json!(file));
            m.insert("event_duration".into(), json!(rng.random_range(1..=1800)));
        }
        "size" => {
            m.insert("file".into(), json!(file));
            m.insert("lines_of_code".into(), json!(rng.random_range(1..5000)));
        }
        _ => {
            let total = rng.random_range(1..400u32);
            let failed = rng.random_range(0..=total / 10);
            m.insert("suite".into(), json!(file));
            m.insert("tests_passed".into(), json!(total - failed));
            m.insert("tests_failed".into(), json!(failed));
        }
    }
    m
}
