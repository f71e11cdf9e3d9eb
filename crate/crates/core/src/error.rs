use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in gradient of parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("agent {agent} has no available action")]
    Infeasible { agent: usize },

    #[error("joint action space of {size} exceeds the enumeration cap {cap}")]
    Size { size: u128, cap: u128 },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("step grids are not aligned: {0}")]
    Alignment(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
