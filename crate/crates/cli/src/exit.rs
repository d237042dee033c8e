//! Exit codes.
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | any other failure |
//! | 2 | usage or configuration error |
//! | 3 | some events were rejected by the collector |
//! | 4 | credentials refused |
//! | 5 | collector unreachable or failing; retrying is safe |
//! | 6 | not a git working copy |

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    PartialRejection(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("{0}")]
    NotARepository(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::PartialRejection(_) => 3,
            CliError::Unauthorized(_) => 4,
            CliError::Transport(_) => 5,
            CliError::NotARepository(_) => 6,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

impl From<devmetrics::collector::client::ClientError> for CliError {
    fn from(e: devmetrics::collector::client::ClientError) -> Self {
        use devmetrics::collector::client::ClientError;
        match e {
            ClientError::Unauthorized => CliError::Unauthorized("collector refused the credentials".into()),
            ClientError::Transport(m) => CliError::Transport(m),
            ClientError::Server { status, body } if status >= 500 => CliError::Transport(format!("{status}: {body}")),
            ClientError::Server { status: 400, body } => CliError::Usage(body),
            other => CliError::Other(anyhow::anyhow!(other)),
        }
    }
}
