//! Settings resolution: command-line flags, then `DEVMETRICS_*` environment
//! variables, then the TOML config file, then built-in defaults.
//!
//! ```toml
//! server_url = "http://127.0.0.1:8080"
//! data_dir = "/var/lib/devmetrics"
//! reader_key = "change-me"
//! registration_key = "optional"
//! buffer_path = "/home/me/.devmetrics/buffer.log"
//! sink_dir = "/var/lib/devmetrics/sink"
//! log_level = "info"
//!
//! [agent]
//! code_name = "vcs"
//! full_name = "Git commit collector"
//! secret_key = "…uuid…"
//! install_guid = "…uuid…"
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use devmetrics::envelope::{parse_uuid_strict, AgentDescriptor};
use serde::Deserialize;

use crate::exit::CliError;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "devmetrics-data";

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "DEVMETRICS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Collector base URL.
    #[arg(long, global = true, env = "DEVMETRICS_SERVER")]
    pub server: Option<String>,
    /// Collector data directory (serve).
    #[arg(long, global = true, env = "DEVMETRICS_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Key for pull, stats and analytics routes.
    #[arg(long, global = true, env = "DEVMETRICS_READER_KEY", hide_env_values = true)]
    pub reader_key: Option<String>,
    /// Key required to register agents, if the collector sets one.
    #[arg(long, global = true, env = "DEVMETRICS_REGISTRATION_KEY", hide_env_values = true)]
    pub registration_key: Option<String>,
    /// Agent buffer file.
    #[arg(long, global = true, env = "DEVMETRICS_BUFFER")]
    pub buffer: Option<PathBuf>,
    /// Directory of unified tables.
    #[arg(long, global = true, env = "DEVMETRICS_SINK_DIR")]
    pub sink_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "DEVMETRICS_CODE_NAME")]
    pub code_name: Option<String>,
    #[arg(long, global = true, env = "DEVMETRICS_FULL_NAME")]
    pub full_name: Option<String>,
    #[arg(long, global = true, env = "DEVMETRICS_SECRET_KEY", hide_env_values = true)]
    pub secret_key: Option<String>,
    #[arg(long, global = true, env = "DEVMETRICS_INSTALL_GUID")]
    pub install_guid: Option<String>,
    #[arg(long, global = true, env = "DEVMETRICS_LOG")]
    pub log_level: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAgent {
    code_name: Option<String>,
    full_name: Option<String>,
    secret_key: Option<String>,
    install_guid: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    server_url: Option<String>,
    data_dir: Option<PathBuf>,
    reader_key: Option<String>,
    registration_key: Option<String>,
    buffer_path: Option<PathBuf>,
    sink_dir: Option<PathBuf>,
    log_level: Option<String>,
    #[serde(default)]
    agent: FileAgent,
}

/// Fully resolved settings; every path is absolute.
#[derive(Debug, Clone)]
pub struct Config {
    pub server: String,
    pub data_dir: PathBuf,
    pub reader_key: Option<String>,
    pub registration_key: Option<String>,
    pub buffer: PathBuf,
    pub sink_dir: PathBuf,
    pub log_level: String,
    pub json: bool,
    code_name: Option<String>,
    full_name: Option<String>,
    secret_key: Option<String>,
    install_guid: Option<String>,
}

fn absolute(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl Config {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let cwd = std::env::current_dir().map_err(|e| CliError::Other(e.into()))?;
        let (file, file_dir) = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let parsed: FileConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
                let dir = absolute(path, &cwd).parent().map(Path::to_path_buf).unwrap_or_else(|| cwd.clone());
                (parsed, dir)
            }
            None => (FileConfig::default(), cwd.clone()),
        };
        // Flag and env paths are relative to the working directory, file
        // paths to the file's directory.
        let pick_path = |flag: &Option<PathBuf>, from_file: &Option<PathBuf>| -> Option<PathBuf> {
            flag.as_ref()
                .map(|p| absolute(p, &cwd))
                .or_else(|| from_file.as_ref().map(|p| absolute(p, &file_dir)))
        };
        let data_dir = pick_path(&args.data_dir, &file.data_dir).unwrap_or_else(|| cwd.join(DEFAULT_DATA_DIR));
        let buffer = pick_path(&args.buffer, &file.buffer_path).unwrap_or_else(|| data_dir.join("agent").join("buffer.log"));
        let sink_dir = pick_path(&args.sink_dir, &file.sink_dir).unwrap_or_else(|| data_dir.join("sink"));
        let or = |flag: &Option<String>, from_file: Option<String>| flag.clone().or(from_file);
        Ok(Config {
            server: or(&args.server, file.server_url).unwrap_or_else(|| DEFAULT_SERVER.into()).trim_end_matches('/').into(),
            data_dir,
            reader_key: or(&args.reader_key, file.reader_key),
            registration_key: or(&args.registration_key, file.registration_key),
            buffer,
            sink_dir,
            log_level: or(&args.log_level, file.log_level).unwrap_or_else(|| "warn".into()),
            json: args.json,
            code_name: or(&args.code_name, file.agent.code_name),
            full_name: or(&args.full_name, file.agent.full_name),
            secret_key: or(&args.secret_key, file.agent.secret_key),
            install_guid: or(&args.install_guid, file.agent.install_guid),
        })
    }

    pub fn require_reader_key(&self) -> Result<&str, CliError> {
        self.reader_key
            .as_deref()
            .ok_or_else(|| CliError::Usage("a reader key is required (--reader-key, DEVMETRICS_READER_KEY or config)".into()))
    }

    pub fn agent_code_name(&self) -> Option<&str> {
        self.code_name.as_deref()
    }

    pub fn agent_full_name(&self) -> Option<&str> {
        self.full_name.as_deref()
    }

    /// The agent identity used to stamp and submit envelopes.
    pub fn agent(&self) -> Result<AgentDescriptor, CliError> {
        let missing = |what: &str| CliError::Usage(format!("agent {what} is not configured (flag, env or [agent] in config)"));
        let uuid = |what: &str, v: &Option<String>| -> Result<_, CliError> {
            let raw = v.as_deref().ok_or_else(|| missing(what))?;
            parse_uuid_strict(raw).ok_or_else(|| CliError::Usage(format!("agent {what} {raw:?} is not a UUID")))
        };
        Ok(AgentDescriptor {
            code_name: self.code_name.clone().ok_or_else(|| missing("code_name"))?,
            full_name: self.full_name.clone().unwrap_or_else(|| self.code_name.clone().unwrap_or_default()),
            secret_key: uuid("secret_key", &self.secret_key)?,
            install_guid: uuid("install_guid", &self.install_guid)?,
        })
    }
}
