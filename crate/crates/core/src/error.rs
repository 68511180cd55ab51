use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator. Variants carry enough context to emit a
/// machine-readable report from the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sub-model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad IDX magic in {path}: expected 0x{expected:08x}, got 0x{got:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },

    #[error("truncated IDX file {path}: needed {needed} bytes, have {have}")]
    TruncatedFile {
        path: PathBuf,
        needed: usize,
        have: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error(
        "infeasible allocation: budget requires mean dropout {required} but d_max = {d_max}"
    )]
    Infeasible { required: f64, d_max: f64 },

    #[error("linear program reported {0}")]
    Solver(String),

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite value in {0}")]
    NumericOverflow(String),

    #[error("aggregation received no uploads")]
    EmptyUploads,

    #[error("step-size condition violated: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("baseline never reached target accuracy {0}")]
    TargetNotReached(f64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("round {round}, client {client}: {source}")]
    InRound {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach round/client context when propagating out of the round loop.
    pub fn in_round(self, round: usize, client: usize) -> Self {
        Error::InRound {
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
