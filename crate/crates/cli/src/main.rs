//! `devmetrics`: one binary for every stage, from collecting events to
//! exporting unified tables.

mod commands;
mod config;
mod exit;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, GlobalArgs};

#[derive(Debug, Parser)]
#[command(name = "devmetrics", version, about = "Collect, store, unify and analyze software process metrics")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the collector service until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Static files served under /ui.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Refuse appends once the store holds this many bytes.
        #[arg(long)]
        max_bytes: Option<u64>,
        /// fsync every appended record before acknowledging it.
        #[arg(long)]
        fsync: bool,
    },
    /// Register a new agent install (named by --code-name / --full-name)
    /// and print its credentials.
    Register,
    /// Agent-side operations on the local buffer.
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Project stored documents into a table.
    Unify {
        #[arg(long)]
        mapping: PathBuf,
        /// Drain what is stored now, then exit (the default).
        #[arg(long, conflicts_with = "follow")]
        once: bool,
        /// Keep polling for new documents until interrupted.
        #[arg(long)]
        follow: bool,
        #[arg(long, default_value_t = devmetrics::unifier::DEFAULT_BATCH_LIMIT)]
        batch_limit: usize,
        #[arg(long, default_value_t = 2000)]
        interval_ms: u64,
    },
    /// Write a unified table as CSV or ARFF.
    Export {
        #[arg(long)]
        table: String,
        #[arg(long)]
        format: devmetrics::exporter::ExportFormat,
        #[arg(long)]
        out: PathBuf,
        /// ARFF relation name; defaults to the table name.
        #[arg(long)]
        relation: Option<String>,
        /// Prepend the install_guid and event_id key columns.
        #[arg(long)]
        with_keys: bool,
    },
    /// Drive synthetic agents against a collector and report throughput.
    LoadTest {
        #[arg(long, default_value_t = 50)]
        agents: u32,
        #[arg(long, default_value_t = 10)]
        rate: u32,
        #[arg(long, default_value_t = 10)]
        duration: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Ignore the schedule and send as fast as possible.
        #[arg(long)]
        max_rate: bool,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 16)]
        concurrency: usize,
    },
    /// Partition and record counts from the collector.
    Stats,
    /// Collector liveness and version.
    Health,
}

#[derive(Debug, Subcommand)]
enum AgentCommand {
    /// Collect events into the local buffer.
    #[command(subcommand)]
    Run(RunCommand),
    /// Record one envelope document from a file, or `-` for stdin.
    Record { file: PathBuf },
    /// Show buffered events.
    List {
        #[arg(long)]
        keyword: Option<String>,
        #[arg(long)]
        application: Option<String>,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        state: Option<String>,
    },
    /// Send pending events to the collector.
    Submit {
        #[arg(long, value_delimiter = ',', required_unless_present = "all_pending", conflicts_with = "all_pending")]
        ids: Vec<String>,
        #[arg(long)]
        all_pending: bool,
    },
    /// Serve the local review endpoint (/local/*) until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        listen: SocketAddr,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum RunCommand {
    /// One event per commit of a git working copy.
    Vcs {
        #[arg(long, default_value = ".")]
        repo: PathBuf,
        /// Only commits authored at or after this instant.
        #[arg(long)]
        since: Option<String>,
    },
    /// Deterministic activity/size/defect events.
    Synthetic {
        #[arg(long, default_value_t = 1)]
        agents: u32,
        #[arg(long, default_value_t = 1)]
        rate: u32,
        #[arg(long, default_value_t = 10)]
        duration: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// First event timestamp; defaults to now.
        #[arg(long)]
        start: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&config.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match commands::dispatch(cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
