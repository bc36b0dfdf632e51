use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error type shared by every module of the crate.
///
/// Each variant maps to one owning module so that the CLI can report
/// provenance alongside the message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault at node {node}: {what}")]
    NumericFault { node: usize, what: String },

    #[error("ODE solver diverged: exceeded {max_steps} steps at t = {t}")]
    Divergence { max_steps: usize, t: f64 },

    #[error("unstable model: spectral radius {rho} >= 1")]
    Unstable { rho: f64 },

    #[error("error bound inapplicable: max transition Lipschitz constant {l_t} >= 1")]
    BoundInapplicable { l_t: f64 },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),

    #[error("replay differs from its manifest: {0}")]
    ReplayMismatch(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract_violation",
            Error::NumericFault { .. } => "numeric_fault",
            Error::Divergence { .. } => "divergence",
            Error::Unstable { .. } => "unstable_model",
            Error::BoundInapplicable { .. } => "bound_inapplicable",
            Error::Training(_) => "training_aborted",
            Error::Config(_) => "invalid_config",
            Error::Parse { .. } => "parse_error",
            Error::Io { .. } => "io_error",
            Error::Serde(_) => "serialization",
            Error::ReplayMismatch(_) => "replay_mismatch",
        }
    }

    /// Module that owns this class of failure.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Contract(_) | Error::NumericFault { .. } | Error::Divergence { .. } => {
                "diffcore"
            }
            Error::Unstable { .. } => "pointproc",
            Error::Training(_) => "njode",
            Error::BoundInapplicable { .. } => "meanfield",
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Serde(_)
            | Error::ReplayMismatch(_) => {
                "harness"
            }
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
