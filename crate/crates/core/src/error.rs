use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} of {which} has zero norm")]
    ZeroNormRow { which: &'static str, row: usize },

    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix of shape {rows}x{cols} cannot hold {len} values")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value {value} at parameter {param}, entry {entry}")]
    NonFiniteProbe {
        param: usize,
        entry: usize,
        value: f64,
    },

    #[error("row {row} is not a probability vector (sums to {sum})")]
    NotProbability { row: usize, sum: f64 },

    #[error("class {class} has no items")]
    EmptyClass { class: usize },

    #[error("prototype for class {class} is the zero vector")]
    ZeroPrototype { class: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {value} at domain {domain}, batch {batch}")]
    NonFiniteLoss {
        domain: usize,
        batch: usize,
        value: f64,
    },

    #[error("parameters became non-finite at domain {domain}, batch {batch}")]
    NonFiniteParameter { domain: usize, batch: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
