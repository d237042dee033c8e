//! Pull-style agent for git working copies: one `vcs-commit` event per
//! commit reachable from `HEAD`, keyed by commit id.

use std::path::Path;
use std::process::Command;

use serde_json::{json, Map};

use super::buffer::{Buffer, BufferError};
use crate::envelope::{AgentDescriptor, MetricEnvelope, ValidationError};
use crate::time::Timestamp;

pub const EVENT_TYPE: &str = "vcs-commit";

const RECORD_SEP: char = '\u{1e}';
const FIELD_SEP: char = '\u{1f}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitInfo {
    pub id: String,
    pub author: String,
    pub author_email: String,
    pub authored_at: Timestamp,
    pub message_length: usize,
    pub files_changed: u64,
    pub insertions: u64,
    pub deletions: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum VcsError {
    #[error("{0} is not a git working copy")]
    NotARepository(String),
    #[error("git failed: {0}")]
    Git(String),
    #[error("could not parse git output: {0}")]
    Parse(String),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Envelope(#[from] ValidationError),
}

fn git(repo: &Path, args: &[&str]) -> Result<std::process::Output, VcsError> {
    Command::new("git")
        .arg("-C")
        .arg(repo)
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()
        .map_err(|e| VcsError::Git(e.to_string()))
}

/// Commits reachable from `HEAD`, oldest first. An empty repository has none.
pub fn read_commits(repo: &Path) -> Result<Vec<CommitInfo>, VcsError> {
    let inside = git(repo, &["rev-parse", "--is-inside-work-tree"])?;
    if !inside.status.success() || String::from_utf8_lossy(&inside.stdout).trim() != "true" {
        return Err(VcsError::NotARepository(repo.display().to_string()));
    }
    let head = git(repo, &["rev-parse", "--verify", "-q", "HEAD"])?;
    if !head.status.success() {
        return Ok(Vec::new());
    }

    let out = git(
        repo,
        &[
            "-c",
            "core.quotepath=off",
            "log",
            "--reverse",
            "--no-color",
            "--no-renames",
            "--numstat",
            "--format=%x1e%H%x1f%an%x1f%ae%x1f%aI%x1f%B%x1f",
        ],
    )?;
    if !out.status.success() {
        return Err(VcsError::Git(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.split(RECORD_SEP).filter(|chunk| !chunk.trim().is_empty()).map(parse_commit).collect()
}

fn parse_commit(chunk: &str) -> Result<CommitInfo, VcsError> {
    let fields: Vec<&str> = chunk.splitn(6, FIELD_SEP).collect();
    let [id, author, email, date, body, numstat] = fields[..] else {
        return Err(VcsError::Parse(format!("expected 6 fields in {chunk:?}")));
    };
    let authored_at = Timestamp::parse_any_offset(date).map_err(|e| VcsError::Parse(e.to_string()))?;
    let (mut files, mut insertions, mut deletions) = (0u64, 0u64, 0u64);
    for line in numstat.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.splitn(3, '\t');
        let (Some(ins), Some(del), Some(_path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(VcsError::Parse(format!("bad numstat line {line:?}")));
        };
        files += 1;
        // Binary files report "-".
        insertions += ins.parse::<u64>().unwrap_or(0);
        deletions += del.parse::<u64>().unwrap_or(0);
    }
    Ok(CommitInfo {
        id: id.trim().to_string(),
        author: author.to_string(),
        author_email: email.to_string(),
        authored_at,
        message_length: body.trim_end().chars().count(),
        files_changed: files,
        insertions,
        deletions,
    })
}

pub fn commit_envelope(commit: &CommitInfo, agent: &AgentDescriptor, repository: &str) -> Result<MetricEnvelope, ValidationError> {
    let mut metrics = Map::new();
    metrics.insert("event_id".into(), json!(commit.id));
    metrics.insert("event_type".into(), json!(EVENT_TYPE));
    metrics.insert("application".into(), json!("git"));
    metrics.insert("repository".into(), json!(repository));
    metrics.insert("commit_id".into(), json!(commit.id));
    metrics.insert("author".into(), json!(commit.author));
    metrics.insert("author_email".into(), json!(commit.author_email));
    metrics.insert("message_length".into(), json!(commit.message_length));
    metrics.insert("files_changed".into(), json!(commit.files_changed));
    metrics.insert("insertions".into(), json!(commit.insertions));
    metrics.insert("deletions".into(), json!(commit.deletions));
    MetricEnvelope::new(commit.authored_at, agent.clone(), metrics)
}

/// Records every commit not yet in the buffer (optionally only those
/// authored at or after `since`) and returns how many were new.
pub fn run_vcs_agent(buffer: &Buffer, repo: &Path, since: Option<Timestamp>, agent: &AgentDescriptor) -> Result<usize, VcsError> {
    let commits = read_commits(repo)?;
    let repository = repo
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| repo.display().to_string());
    let mut recorded = 0;
    for commit in commits {
        if since.is_some_and(|s| commit.authored_at < s) || buffer.contains(&commit.id) {
            continue;
        }
        match buffer.record(commit_envelope(&commit, agent, &repository)?) {
            Ok(_) => recorded += 1,
            Err(BufferError::Duplicate(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(recorded)
}

/// Helpers for building throwaway repositories in tests.
#[doc(hidden)]
pub mod fixture {
    use super::*;

    pub fn git_ok(repo: &Path, args: &[&str]) {
        let out = Command::new("git")
            .arg("-C")
            .arg(repo)
            .args(args)
            .env("GIT_AUTHOR_NAME", "Fixture Author")
            .env("GIT_AUTHOR_EMAIL", "author@example.com")
            .env("GIT_COMMITTER_NAME", "Fixture Author")
            .env("GIT_COMMITTER_EMAIL", "author@example.com")
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    pub fn init(repo: &Path) {
        std::fs::create_dir_all(repo).unwrap();
        git_ok(repo, &["init", "-q", "-b", "main"]);
    }

    /// Writes `files` and commits them with the given author date; returns
    /// the new commit id.
    pub fn commit(repo: &Path, files: &[(&str, &str)], message: &str, date: &str) -> String {
        for (name, content) in files {
            let path = repo.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).unwrap();
            }
            std::fs::write(path, content).unwrap();
        }
        git_ok(repo, &["add", "-A"]);
        let out = Command::new("git")
            .arg("-C")
            .arg(repo)
            .args(["commit", "-q", "-m", message])
            .env("GIT_AUTHOR_NAME", "Fixture Author")
            .env("GIT_AUTHOR_EMAIL", "author@example.com")
            .env("GIT_COMMITTER_NAME", "Fixture Author")
            .env("GIT_COMMITTER_EMAIL", "author@example.com")
            .env("GIT_AUTHOR_DATE", date)
            .env("GIT_COMMITTER_DATE", date)
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git commit: {}", String::from_utf8_lossy(&out.stderr));
        let head = Command::new("git").arg("-C").arg(repo).args(["rev-parse", "HEAD"]).output().unwrap();
        String::from_utf8(head.stdout).unwrap().trim().to_string()
    }
}
