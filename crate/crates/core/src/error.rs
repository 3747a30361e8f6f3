use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// The variants map one-to-one onto the CLI exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("divergence at node {node} after {step} steps (t = {time}): {detail}")]
    Divergence {
        node: usize,
        step: u64,
        time: f64,
        detail: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bound check failed: {0}")]
    BoundCheck(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code: 1 config, 2 data, 3 divergence, 4 bound-check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Singular(_) | Error::Json(_) => 1,
            Error::Data(_) | Error::Csv(_) | Error::Io(_) => 2,
            Error::Divergence { .. } => 3,
            Error::BoundCheck(_) => 4,
        }
    }
}
