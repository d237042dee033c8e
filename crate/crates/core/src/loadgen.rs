//! Write-path load generator.
//!
//! Registers one collector install per synthetic agent, then either replays
//! the synthetic schedule in real time (each agent sends its envelopes for
//! second `s` as one batch at `start + s`) or pushes the same envelopes as
//! fast as the server accepts them in fixed-size batches.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::synthetic::SyntheticProfile;
use crate::collector::http::{HEADER_INSTALL_GUID, HEADER_SECRET_KEY};
use crate::collector::{Registration, SubmitReceipt, MAX_BATCH};
use crate::envelope::AgentDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LoadMode {
    /// One batch per agent per second, on schedule.
    Paced,
    /// Batches of `batch_size`, `concurrency` requests in flight.
    MaxRate { batch_size: usize, concurrency: usize },
}

#[derive(Debug, Clone)]
pub struct LoadTestConfig {
    pub server: String,
    pub registration_key: Option<String>,
    pub profile: SyntheticProfile,
    pub mode: LoadMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &mut [Duration]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let rank = |p: f64| {
            let i = ((p / 100.0) * samples.len() as f64).ceil() as usize;
            samples[i.clamp(1, samples.len()) - 1].as_secs_f64() * 1000.0
        };
        LatencySummary {
            p50_ms: rank(50.0),
            p90_ms: rank(90.0),
            p99_ms: rank(99.0),
            max_ms: samples[samples.len() - 1].as_secs_f64() * 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub mode: LoadMode,
    pub agents: u32,
    /// Envelopes sent, counting each once.
    pub attempted: u64,
    pub accepted: u64,
    pub duplicates: u64,
    /// Elements the collector refused as invalid.
    pub rejected: u64,
    pub requests: u64,
    /// Requests that failed as a whole: transport errors, 5xx, 507.
    pub overload_failures: u64,
    pub elapsed_s: f64,
    pub accepted_per_s: f64,
    pub latency: LatencySummary,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("bad load profile: {0}")]
    BadProfile(String),
    #[error("could not register agent: {0}")]
    Registration(String),
}

#[derive(Default)]
struct Tally {
    accepted: u64,
    duplicates: u64,
    rejected: u64,
    requests: u64,
    failures: u64,
    latencies: Vec<Duration>,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        self.accepted += other.accepted;
        self.duplicates += other.duplicates;
        self.rejected += other.rejected;
        self.requests += other.requests;
        self.failures += other.failures;
        self.latencies.extend(other.latencies);
    }
}

async fn register(http: &reqwest::Client, cfg: &LoadTestConfig, i: u32) -> Result<AgentDescriptor, LoadError> {
    let mut req = http
        .post(format!("{}/api/v1/agents/register", cfg.server))
        .json(&json!({ "code_name": format!("load-{i}"), "full_name": "Load test agent" }));
    if let Some(key) = &cfg.registration_key {
        req = req.header(HEADER_SECRET_KEY, key);
    }
    let response = req.send().await.map_err(|e| LoadError::Registration(e.to_string()))?;
    if !response.status().is_success() {
        return Err(LoadError::Registration(format!("server answered {}", response.status())));
    }
    let reg: Registration = response.json().await.map_err(|e| LoadError::Registration(e.to_string()))?;
    Ok(AgentDescriptor {
        code_name: reg.code_name,
        full_name: reg.full_name,
        secret_key: reg.secret_key,
        install_guid: reg.install_guid,
    })
}

async fn send(http: &reqwest::Client, server: &str, agent: &AgentDescriptor, batch: &[Value], tally: &mut Tally) {
    let started = Instant::now();
    let result = http
        .post(format!("{server}/api/v1/events:batch"))
        .header(HEADER_SECRET_KEY, agent.secret_key.to_string())
        .header(HEADER_INSTALL_GUID, agent.install_guid.to_string())
        .json(batch)
        .send()
        .await;
    tally.requests += 1;
    let receipt = match result {
        Ok(r) if r.status().is_success() => r.json::<SubmitReceipt>().await.ok(),
        _ => None,
    };
    tally.latencies.push(started.elapsed());
    match receipt {
        Some(r) => {
            tally.accepted += r.accepted as u64;
            tally.duplicates += r.duplicates as u64;
            tally.rejected += r.rejected.len() as u64;
        }
        None => tally.failures += 1,
    }
}

pub async fn run_load_test(cfg: LoadTestConfig) -> Result<LoadReport, LoadError> {
    let p = &cfg.profile;
    if p.agents == 0 || p.rate_per_s == 0 || p.duration_s == 0 {
        return Err(LoadError::BadProfile("agents, rate and duration must be positive".into()));
    }
    if let LoadMode::MaxRate { batch_size, concurrency } = cfg.mode {
        if batch_size == 0 || batch_size > MAX_BATCH || concurrency == 0 {
            return Err(LoadError::BadProfile(format!(
                "batch size must be 1..={MAX_BATCH} and concurrency positive"
            )));
        }
    }
    let http = reqwest::Client::builder()
        .timeout(Duration::from_secs(30))
        .pool_max_idle_per_host(p.agents as usize)
        .build()
        .map_err(|e| LoadError::Registration(e.to_string()))?;

    let mut agents = Vec::with_capacity(p.agents as usize);
    for i in 0..p.agents {
        agents.push(register(&http, &cfg, i).await?);
    }

    // envelopes[agent][second] in schedule order.
    let rate = p.rate_per_s as usize;
    let mut per_agent: Vec<Vec<Value>> = vec![Vec::new(); agents.len()];
    let mut stream = p.stream_for(agents.clone());
    loop {
        let agent = stream.next_agent();
        let Some(envelope) = stream.next() else { break };
        per_agent[agent].push(envelope.to_value());
    }
    let attempted: u64 = per_agent.iter().map(|v| v.len() as u64).sum();

    let started = Instant::now();
    let mut tasks = tokio::task::JoinSet::new();
    match cfg.mode {
        LoadMode::Paced => {
            let origin = tokio::time::Instant::now();
            for (agent, events) in agents.into_iter().zip(per_agent) {
                let http = http.clone();
                let server = cfg.server.clone();
                tasks.spawn(async move {
                    let mut tally = Tally::default();
                    for (second, batch) in events.chunks(rate).enumerate() {
                        tokio::time::sleep_until(origin + Duration::from_secs(second as u64)).await;
                        send(&http, &server, &agent, batch, &mut tally).await;
                    }
                    tally
                });
            }
        }
        LoadMode::MaxRate { batch_size, concurrency } => {
            let mut work: Vec<(AgentDescriptor, Vec<Value>)> = Vec::new();
            for (agent, events) in agents.iter().zip(&per_agent) {
                for chunk in events.chunks(batch_size) {
                    work.push((agent.clone(), chunk.to_vec()));
                }
            }
            let queue = std::sync::Arc::new(parking_lot::Mutex::new(work.into_iter()));
            for _ in 0..concurrency {
                let http = http.clone();
                let server = cfg.server.clone();
                let queue = queue.clone();
                tasks.spawn(async move {
                    let mut tally = Tally::default();
                    loop {
                        let next = queue.lock().next();
                        let Some((agent, batch)) = next else { break };
                        send(&http, &server, &agent, &batch, &mut tally).await;
                    }
                    tally
                });
            }
        }
    }
    let mut total = Tally::default();
    while let Some(joined) = tasks.join_next().await {
        total.merge(joined.expect("load task panicked"));
    }
    let elapsed_s = started.elapsed().as_secs_f64();
    Ok(LoadReport {
        mode: cfg.mode,
        agents: cfg.profile.agents,
        attempted,
        accepted: total.accepted,
        duplicates: total.duplicates,
        rejected: total.rejected,
        requests: total.requests,
        overload_failures: total.failures,
        elapsed_s,
        accepted_per_s: if elapsed_s > 0.0 { total.accepted as f64 / elapsed_s } else { 0.0 },
        latency: LatencySummary::from_samples(&mut total.latencies),
    })
}

/// Runs [`run_load_test`] on a private runtime.
pub fn run_load_test_blocking(cfg: LoadTestConfig) -> Result<LoadReport, LoadError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
        .block_on(run_load_test(cfg))
}
