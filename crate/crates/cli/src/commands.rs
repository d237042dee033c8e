use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use devmetrics::agent::local_http;
use devmetrics::agent::synthetic::SyntheticProfile;
use devmetrics::agent::vcs::{self, VcsError};
use devmetrics::agent::{submit_selected, Buffer, EventState, HttpTransport, LocalEvent, ReviewFilter, SubmitError, Transport, TransportError};
use devmetrics::collector::client::CollectorClient;
use devmetrics::collector::http::{router, BackgroundServer};
use devmetrics::collector::{Collector, CollectorConfig, Credentials, SubmitReceipt};
use devmetrics::envelope::MetricEnvelope;
use devmetrics::exporter::{export_table, ExportRequest};
use devmetrics::loadgen::{run_load_test_blocking, LoadMode, LoadReport, LoadTestConfig};
use devmetrics::store::StoreOptions;
use devmetrics::time::Timestamp;
use devmetrics::unifier::{unify_until_caught_up, FileSink, HttpSource, MappingSpec, SourceError, UnifyError, UnifyReport};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::exit::CliError;
use crate::{AgentCommand, Command, RunCommand};

type CliResult = Result<(), CliError>;

/// Prints `value` as pretty JSON under `--json`, otherwise `text`.
fn emit<T: Serialize>(config: &Config, value: &T, text: impl FnOnce() -> String) -> CliResult {
    let mut out = std::io::stdout().lock();
    let rendered = if config.json {
        serde_json::to_string_pretty(value).context("serializing output")?
    } else {
        text()
    };
    writeln!(out, "{rendered}").context("writing output")?;
    Ok(())
}

fn parse_time(name: &str, value: Option<&str>) -> Result<Option<Timestamp>, CliError> {
    value
        .map(|v| Timestamp::parse_any_offset(v).map_err(|_| CliError::Usage(format!("--{name}: {v:?} is not an ISO-8601 timestamp"))))
        .transpose()
}

fn client(config: &Config) -> Result<CollectorClient, CliError> {
    Ok(CollectorClient::new(config.server.clone())?)
}

fn open_buffer(config: &Config) -> Result<Buffer, CliError> {
    if let Some(parent) = config.buffer.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Buffer::open(&config.buffer).with_context(|| format!("opening buffer {}", config.buffer.display())).map_err(CliError::from)
}

/// Blocks until Ctrl-C.
fn wait_for_interrupt() -> CliResult {
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().context("tokio runtime")?;
    runtime.block_on(tokio::signal::ctrl_c()).context("waiting for Ctrl-C")?;
    Ok(())
}

pub fn dispatch(command: Command, config: &Config) -> CliResult {
    match command {
        Command::Serve { listen, ui_dir, max_bytes, fsync } => {
            let reader_key = config.require_reader_key()?;
            let mut cc = CollectorConfig::new(&config.data_dir, reader_key);
            cc.registration_key = config.registration_key.clone();
            cc.store = StoreOptions { fsync, max_bytes };
            let collector = Arc::new(Collector::open(cc).context("opening collector")?);
            let server = BackgroundServer::start(router(collector, ui_dir), listen).context("binding listener")?;
            println!("listening on {}", server.url());
            std::io::stdout().flush().ok();
            wait_for_interrupt()
        }
        Command::Register => {
            let code_name = config.agent_code_name().ok_or_else(|| CliError::Usage("--code-name is required".into()))?;
            let full_name = config.agent_full_name().unwrap_or(code_name);
            let reg = client(config)?.register(code_name, full_name, config.registration_key.as_deref())?;
            emit(config, &reg, || {
                format!(
                    "[agent]\ncode_name = {:?}\nfull_name = {:?}\nsecret_key = \"{}\"\ninstall_guid = \"{}\"",
                    reg.code_name, reg.full_name, reg.secret_key, reg.install_guid
                )
            })
        }
        Command::Agent(cmd) => agent(cmd, config),
        Command::Unify { mapping, once: _, follow, batch_limit, interval_ms } => unify(config, &mapping, follow, batch_limit, interval_ms),
        Command::Export { table, format, out, relation, with_keys } => {
            let sink = FileSink::open(&config.sink_dir).context("opening sink")?;
            let out = if out.is_absolute() { out } else { std::env::current_dir().context("cwd")?.join(out) };
            let request = ExportRequest { table, format, out, relation, include_keys: with_keys };
            let rows = export_table(&sink, &request).map_err(|e| CliError::Other(e.into()))?;
            emit(config, &json!({ "table": request.table, "format": request.format, "rows": rows, "out": request.out }), || {
                format!("wrote {rows} rows to {}", request.out.display())
            })
        }
        Command::LoadTest { agents, rate, duration, seed, max_rate, batch_size, concurrency } => {
            let mode = if max_rate { LoadMode::MaxRate { batch_size, concurrency } } else { LoadMode::Paced };
            let report = run_load_test_blocking(LoadTestConfig {
                server: config.server.clone(),
                registration_key: config.registration_key.clone(),
                profile: SyntheticProfile { agents, rate_per_s: rate, duration_s: duration, seed, start: Timestamp::now() },
                mode,
            })
            .map_err(|e| match e {
                devmetrics::loadgen::LoadError::BadProfile(m) => CliError::Usage(m),
                other => CliError::Transport(other.to_string()),
            })?;
            emit(config, &report, || load_text(&report))?;
            if report.overload_failures > 0 {
                return Err(CliError::Transport(format!("{} requests failed", report.overload_failures)));
            }
            if report.rejected > 0 {
                return Err(CliError::PartialRejection(format!("{} envelopes rejected", report.rejected)));
            }
            Ok(())
        }
        Command::Stats => {
            let stats = client(config)?.stats(config.require_reader_key()?)?;
            emit(config, &stats, || {
                let partitions = stats["partitions"].as_array().map(Vec::as_slice).unwrap_or_default();
                let records: u64 = partitions.iter().filter_map(|p| p["stats"]["count"].as_u64()).sum();
                format!("partitions: {}\nrecords: {records}", partitions.len())
            })
        }
        Command::Health => {
            let health = client(config)?.health()?;
            emit(config, &health, || {
                format!("ok: version {}, {} records, up {:.0}s", health.version, health.records, health.uptime_s)
            })
        }
    }
}

fn load_text(r: &LoadReport) -> String {
    format!(
        "attempted {} envelopes in {} requests over {:.2}s\naccepted {} ({:.0}/s), duplicates {}, rejected {}, failed requests {}\nlatency ms: p50 {:.2}, p90 {:.2}, p99 {:.2}, max {:.2}",
        r.attempted,
        r.requests,
        r.elapsed_s,
        r.accepted,
        r.accepted_per_s,
        r.duplicates,
        r.rejected,
        r.overload_failures,
        r.latency.p50_ms,
        r.latency.p90_ms,
        r.latency.p99_ms,
        r.latency.max_ms
    )
}

fn unify(config: &Config, mapping: &Path, follow: bool, batch_limit: usize, interval_ms: u64) -> CliResult {
    let spec = MappingSpec::load(mapping).map_err(|e| CliError::Usage(e.to_string()))?;
    let source = HttpSource { client: client(config)?, reader_key: config.require_reader_key()?.to_string() };
    let sink = FileSink::open(&config.sink_dir).context("opening sink")?;
    let run = || -> Result<UnifyReport, CliError> {
        unify_until_caught_up(&spec, &source, &sink, batch_limit).map_err(|e| match e {
            UnifyError::Source(SourceError::Unauthorized) => CliError::Unauthorized("collector refused the reader key".into()),
            UnifyError::Source(SourceError::Unavailable(m)) => CliError::Transport(m),
            UnifyError::BadMapping(m) => CliError::Usage(m.to_string()),
            other => CliError::Other(other.into()),
        })
    };
    let show = |r: &UnifyReport| {
        emit(config, r, || {
            format!("{} rows, {} quarantined, {} skipped ({} scanned)", r.rows, r.quarantined, r.skipped, r.scanned)
        })
    };
    if !follow {
        return show(&run()?);
    }
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().context("tokio runtime")?;
    loop {
        let report = run()?;
        if report.scanned > 0 {
            show(&report)?;
        }
        let interrupted = runtime.block_on(async {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => true,
                _ = tokio::time::sleep(Duration::from_millis(interval_ms)) => false,
            }
        });
        if interrupted {
            return Ok(());
        }
    }
}

fn event_line(e: &LocalEvent) -> String {
    let env = &e.envelope;
    let preview: String = env
        .metrics
        .string_leaves()
        .into_iter()
        .filter(|s| *s != env.event_id() && *s != env.event_type())
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .take(60)
        .collect();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        e.id(),
        match e.state {
            EventState::Pending => "pending",
            EventState::Submitted => "submitted",
        },
        env.timestamp,
        env.event_type(),
        env.metrics.application().unwrap_or("-"),
        preview
    )
}

fn http_transport(config: &Config) -> Result<HttpTransport, CliError> {
    let agent = config.agent()?;
    Ok(HttpTransport::new(
        client(config)?,
        Credentials { secret_key: agent.secret_key, install_guid: agent.install_guid },
    ))
}

fn agent(cmd: AgentCommand, config: &Config) -> CliResult {
    match cmd {
        AgentCommand::Run(RunCommand::Vcs { repo, since }) => {
            let since = parse_time("since", since.as_deref())?;
            let agent = config.agent()?;
            let buffer = open_buffer(config)?;
            let recorded = vcs::run_vcs_agent(&buffer, &repo, since, &agent).map_err(|e| match e {
                VcsError::NotARepository(m) => CliError::NotARepository(format!("{m} is not a git working copy")),
                other => CliError::Other(other.into()),
            })?;
            emit(config, &json!({ "recorded": recorded }), || format!("recorded {recorded} events"))
        }
        AgentCommand::Run(RunCommand::Synthetic { agents, rate, duration, seed, start }) => {
            if agents == 0 || rate == 0 || duration == 0 {
                return Err(CliError::Usage("--agents, --rate and --duration must be positive".into()));
            }
            let start = parse_time("start", start.as_deref())?.unwrap_or_else(Timestamp::now);
            let agent = config.agent()?;
            let buffer = open_buffer(config)?;
            let profile = SyntheticProfile { agents, rate_per_s: rate, duration_s: duration, seed, start };
            let mut recorded = 0;
            for envelope in profile.stream_for(vec![agent; agents as usize]) {
                match buffer.record(envelope) {
                    Ok(_) => recorded += 1,
                    Err(devmetrics::agent::BufferError::Duplicate(_)) => {}
                    Err(e) => return Err(CliError::Other(e.into())),
                }
            }
            emit(config, &json!({ "recorded": recorded }), || format!("recorded {recorded} events"))
        }
        AgentCommand::Record { file } => {
            let mut bytes = Vec::new();
            if file.as_os_str() == "-" {
                std::io::stdin().read_to_end(&mut bytes).context("reading stdin")?;
            } else {
                bytes = std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            }
            let envelope = MetricEnvelope::from_json_slice(&bytes).map_err(|e| CliError::Usage(format!("invalid envelope: {e}")))?;
            let buffer = open_buffer(config)?;
            let event = buffer.record(envelope).map_err(|e| CliError::Other(e.into()))?;
            emit(config, &event, || format!("recorded {}", event.id()))
        }
        AgentCommand::List { keyword, application, from, to, state } => {
            let filter = ReviewFilter {
                keyword,
                application,
                from: parse_time("from", from.as_deref())?,
                to: parse_time("to", to.as_deref())?,
                state: state.map(|s| s.parse::<EventState>()).transpose().map_err(CliError::Usage)?,
            };
            let buffer = open_buffer(config)?;
            let events = buffer.list_events(&filter);
            emit(config, &events, || events.iter().map(event_line).collect::<Vec<_>>().join("\n"))
        }
        AgentCommand::Submit { ids, all_pending } => {
            let buffer = open_buffer(config)?;
            let ids = if all_pending { buffer.pending_ids() } else { ids };
            let transport = http_transport(config)?;
            let result = submit_selected(&buffer, &ids, &transport);
            let show = |r: &SubmitReceipt| {
                emit(config, r, || {
                    format!("accepted {}, duplicates {}, rejected {}", r.accepted, r.duplicates, r.rejected.len())
                })
            };
            match result {
                Ok(receipt) => show(&receipt),
                Err(SubmitError::PartialRejection(receipt)) => {
                    show(&receipt)?;
                    Err(CliError::PartialRejection(format!("{} events rejected and left pending", receipt.rejected.len())))
                }
                Err(SubmitError::Transport(TransportError::Unauthorized)) => {
                    Err(CliError::Unauthorized("collector refused the agent credentials".into()))
                }
                Err(SubmitError::Transport(TransportError::Unreachable(m))) => {
                    Err(CliError::Transport(format!("{m}; events stay pending and can be resubmitted")))
                }
                Err(SubmitError::Buffer(e)) => Err(CliError::Usage(e.to_string())),
                Err(e) => Err(CliError::Other(e.into())),
            }
        }
        AgentCommand::Serve { listen, ui_dir } => {
            let buffer = Arc::new(open_buffer(config)?);
            let transport: Arc<dyn Transport> = Arc::new(http_transport(config)?);
            let server = BackgroundServer::start(local_http::router(buffer, transport, ui_dir), listen).context("binding listener")?;
            println!("listening on {}", server.url());
            std::io::stdout().flush().ok();
            wait_for_interrupt()
        }
    }
}
