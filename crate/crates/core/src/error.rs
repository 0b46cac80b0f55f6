use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("cluster state has {got} entries but the topology has {expected} services")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("replica count {replicas} for service `{service}` is outside [{min}, {max}]")]
    ReplicasOutOfRange {
        service: String,
        replicas: u32,
        min: u32,
        max: u32,
    },

    #[error("invalid workload: {0}")]
    InvalidWorkload(String),

    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),

    #[error("queue is unstable (rho = {rho:.4} >= 1)")]
    UnstableQueue { rho: f64 },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("empty rps range: lower {lower} > upper {upper}")]
    EmptyRange { lower: f64, upper: f64 },

    #[error("cannot take a percentile of an empty sample")]
    EmptySample,

    #[error("state space of {size} states exceeds the cap of {cap}")]
    StateSpaceTooLarge { size: u128, cap: u128 },

    #[error("observed rps {rps} is outside the trained range [{lower}, {upper}]")]
    OutOfRange { rps: f64, lower: f64, upper: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            line: source.line(),
            column: source.column(),
            source,
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
