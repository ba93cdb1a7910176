//! CLI error classification; each class maps to a stable exit code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations (exit 2).
    #[error("usage error: {0}")]
    Usage(String),
    /// Unreadable or inconsistent input data (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure during fitting or simulation (exit 4).
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<zimclust_core::Error> for CliError {
    fn from(e: zimclust_core::Error) -> Self {
        use zimclust_core::Error as E;
        match e {
            E::Parse(_)
            | E::Domain(_)
            | E::Dimension(_)
            | E::EmptySelection(_)
            | E::DegenerateCell { .. }
            | E::Io { .. } => CliError::Data(e.to_string()),
            E::Overflow(_)
            | E::Numerical(_)
            | E::EmptyCluster { .. }
            | E::SingularSystem(_)
            | E::NoProgress(_)
            | E::Generator(_)
            | E::Selection(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}
