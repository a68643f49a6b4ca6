use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected \"MGT1\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("value {value} at flat index {index} is not an integer in [0, 255]")]
    OutOfRangeU8 { index: usize, value: f64 },

    #[error("invalid tensor shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid metadata: {0}")]
    Meta(String),

    #[error("feature matrix invariant violated: {0}")]
    Invariant(String),

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("graph has no edges above tau = {tau}; try a lower threshold")]
    EmptyGraph { tau: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-deterministic build: two forward passes disagree ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("invalid PGM file {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
