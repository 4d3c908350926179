use thiserror::Error;

/// Crate-wide error type.
///
/// `Precondition` covers caller contract violations (CLI maps these to exit
/// code 2); everything else is a runtime failure (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unbound leaf node {0}")]
    UnboundLeaf(usize),

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("node {0} is not reachable from the requested inputs")]
    Unreachable(usize),

    #[error("gradient target must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("attack diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("all {0} trials diverged")]
    AllTrialsDiverged(usize),

    #[error("container format error: {0}")]
    Container(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Precondition(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
