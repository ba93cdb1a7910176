//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (bad header, truncated line, non-numeric token).
    #[error("parse error: {0}")]
    Parse(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of related inputs do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A filtering step removed every gene.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// A cell with zero total count cannot receive a size factor.
    #[error("degenerate cell {cell}: total read count is zero")]
    DegenerateCell { cell: usize },

    /// A linear predictor left the representable range.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Non-finite intermediate value or an impossible posterior.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A mixture component lost all responsibility mass.
    #[error("cluster {cluster} became empty{}", iteration.map(|t| format!(" at EM iteration {t}")).unwrap_or_default())]
    EmptyCluster {
        cluster: usize,
        iteration: Option<usize>,
    },

    /// The Fisher scoring system could not be factorized.
    #[error("singular scoring system: {0}")]
    SingularSystem(String),

    /// Step halving was exhausted without improving the objective.
    #[error("no progress: {0}")]
    NoProgress(String),

    /// The simulation generator could not produce a valid draw.
    #[error("generator failure: {0}")]
    Generator(String),

    /// Every restart of a selection run failed.
    #[error("selection failed: {0}")]
    Selection(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
