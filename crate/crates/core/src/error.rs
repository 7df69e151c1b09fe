use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("location {to} is unreachable from location {from}")]
    Disconnected { from: usize, to: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("request {0} is assigned more than once")]
    DoubleAssignment(u64),

    #[error("driver {0} has no candidate actions")]
    NoActions(usize),

    #[error("exact Shapley computation over {n} drivers exceeds the cap of {cap}; use Monte Carlo sampling")]
    TooManyDrivers { n: usize, cap: usize },

    #[error("value model in zero mode cannot be trained")]
    NotTrainable,

    #[error("ratio undefined for drivers with zero value: {0:?}")]
    ZeroValue(Vec<usize>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
