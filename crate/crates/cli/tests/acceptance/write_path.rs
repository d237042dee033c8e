//! Load smoke against a local single-node collector: the paced 50 x 10 x 10
//! profile must complete with no overload failures, and a follow-up
//! max-rate run with batches of 100 must sustain the throughput floor. The
//! floor is a choice of this project for commodity desk hardware.

use std::sync::Arc;

use devmetrics::agent::synthetic::SyntheticProfile;
use devmetrics::collector::http::{router, BackgroundServer};
use devmetrics::collector::{Collector, CollectorConfig};
use devmetrics::loadgen::{run_load_test_blocking, LoadMode, LoadTestConfig};
use devmetrics::time::Timestamp;

use crate::{ensure, Check};

const AGENTS: u32 = 50;
const RATE: u32 = 10;
const DURATION_S: u32 = 10;
const MAX_RATE_BATCH: usize = 100;
const MAX_RATE_CONCURRENCY: usize = 16;
/// 50 agents x 100 events/s x 10 s = 50,000 envelopes.
const MAX_RATE_PER_AGENT_S: u32 = 100;
const FLOOR_ACCEPTED_PER_S: f64 = 5_000.0;

pub fn run() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let collector = Arc::new(Collector::open(CollectorConfig::new(dir.path(), "reader")).map_err(|e| e.to_string())?);
    let server = BackgroundServer::start(router(collector.clone(), None), "127.0.0.1:0".parse().unwrap())
        .map_err(|e| e.to_string())?;

    let profile = SyntheticProfile { agents: AGENTS, rate_per_s: RATE, duration_s: DURATION_S, seed: 7, start: Timestamp::now() };
    let expected = profile.total_events();
    let paced = run_load_test_blocking(LoadTestConfig {
        server: server.url(),
        registration_key: None,
        profile,
        mode: LoadMode::Paced,
    })
    .map_err(|e| e.to_string())?;
    ensure!(paced.attempted == expected, "paced run attempted {} of {expected}", paced.attempted);
    ensure!(paced.overload_failures == 0, "paced run had {} overload failures", paced.overload_failures);
    ensure!(paced.rejected == 0, "paced run had {} rejected elements", paced.rejected);
    ensure!(paced.accepted == expected, "paced run accepted {} of {expected}", paced.accepted);

    let profile = SyntheticProfile {
        agents: AGENTS,
        rate_per_s: MAX_RATE_PER_AGENT_S,
        duration_s: DURATION_S,
        seed: 8,
        start: Timestamp::now(),
    };
    let expected = profile.total_events();
    let burst = run_load_test_blocking(LoadTestConfig {
        server: server.url(),
        registration_key: None,
        profile,
        mode: LoadMode::MaxRate { batch_size: MAX_RATE_BATCH, concurrency: MAX_RATE_CONCURRENCY },
    })
    .map_err(|e| e.to_string())?;
    ensure!(burst.attempted == expected, "max-rate run attempted {} of {expected}", burst.attempted);
    ensure!(burst.overload_failures == 0, "max-rate run had {} overload failures", burst.overload_failures);
    ensure!(burst.rejected == 0, "max-rate run had {} rejected elements", burst.rejected);
    ensure!(
        burst.accepted_per_s.total_cmp(&FLOOR_ACCEPTED_PER_S).is_ge(),
        "max-rate run sustained {:.0} accepted/s, floor {FLOOR_ACCEPTED_PER_S:.0}",
        burst.accepted_per_s
    );
    ensure!(
        collector.store().record_count() == paced.accepted + burst.accepted,
        "store holds {} records",
        collector.store().record_count()
    );
    Ok(format!(
        "paced {} events in {:.1}s with 0 overload; max-rate {:.0} accepted/s (floor {FLOOR_ACCEPTED_PER_S:.0}), p99 {:.1} ms",
        paced.attempted, paced.elapsed_s, burst.accepted_per_s, burst.latency.p99_ms
    ))
}
