//! The whole pipeline through the `devmetrics` binary: register, collect a
//! fixture git repository with the vcs agent, submit, unify with the commits
//! mapping and export CSV.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use devmetrics::agent::vcs::fixture;
use devmetrics::collector::http::{router, BackgroundServer};
use devmetrics::collector::{Collector, CollectorConfig};
use serde_json::Value;

use crate::{ensure, Check};

const COMMITS_MAPPING: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../mappings/commits.map");

fn devmetrics(dir: &Path, server: &str, args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_devmetrics"))
        .current_dir(dir)
        .env_clear()
        .env("DEVMETRICS_SERVER", server)
        .env("DEVMETRICS_READER_KEY", "reader")
        .env("DEVMETRICS_DATA_DIR", dir.join("local"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "devmetrics {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out)
}

pub fn run() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let collector = Arc::new(Collector::open(CollectorConfig::new(dir.path().join("server"), "reader")).map_err(|e| e.to_string())?);
    let server = BackgroundServer::start(router(collector, None), "127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let url = server.url();

    let repo = dir.path().join("project");
    fixture::init(&repo);
    let commits: Vec<String> = [
        ("README.md", "# project\n", "Initial commit", "2017-02-01T09:00:00+03:00"),
        ("src/lib.rs", "pub fn f() {}\n", "Add library", "2017-02-01T11:30:00+03:00"),
        ("src/lib.rs", "pub fn f() -> u8 { 1 }\n", "Return a value", "2017-02-02T10:00:00+03:00"),
        ("tests/t.rs", "#[test]\nfn t() {}\n", "Add a test", "2017-02-03T16:45:00+03:00"),
        ("README.md", "# project\n\nUsage.\n", "Document usage", "2017-02-04T08:15:00+03:00"),
    ]
    .iter()
    .map(|(file, content, message, date)| fixture::commit(&repo, &[(file, content)], message, date))
    .collect();

    let out = devmetrics(dir.path(), &url, &["--code-name", "vcs", "--full-name", "Git commits", "register", "--json"])?;
    let reg: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let secret = reg["secret_key"].as_str().ok_or("no secret_key in registration")?.to_string();
    let guid = reg["install_guid"].as_str().ok_or("no install_guid in registration")?.to_string();
    let agent = ["--code-name", "vcs", "--secret-key", secret.as_str(), "--install-guid", guid.as_str()];

    let repo_arg = repo.to_str().unwrap();
    devmetrics(dir.path(), &url, &[&agent[..], &["agent", "run", "vcs", "--repo", repo_arg]].concat())?;
    devmetrics(dir.path(), &url, &[&agent[..], &["agent", "submit", "--all-pending"]].concat())?;
    devmetrics(dir.path(), &url, &["unify", "--mapping", COMMITS_MAPPING])?;
    let csv = dir.path().join("commits.csv");
    devmetrics(dir.path(), &url, &["export", "--table", "commits", "--format", "csv", "--out", csv.to_str().unwrap()])?;

    let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let id_col = header.iter().position(|h| *h == "commit_id").ok_or("no commit_id column")?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    ensure!(rows.len() == commits.len(), "CSV has {} rows for {} commits", rows.len(), commits.len());

    // Rows are ordered by (install_guid, event_id) and event_id is the commit id.
    let first = commits.iter().min().unwrap();
    ensure!(rows[0][id_col] == first, "first row commit_id {}, expected {first}", rows[0][id_col]);
    let mut exported: Vec<&str> = rows.iter().map(|r| r[id_col]).collect();
    let mut fixture_ids: Vec<&str> = commits.iter().map(String::as_str).collect();
    exported.sort_unstable();
    fixture_ids.sort_unstable();
    ensure!(exported == fixture_ids, "exported commit ids differ from the fixture");
    Ok(format!("{} commits -> {} CSV rows, first row {}", commits.len(), rows.len(), &first[..12]))
}
