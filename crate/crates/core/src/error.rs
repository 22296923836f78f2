use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("batchnorm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("non-finite loss while perturbing parameter `{param}`")]
    Evaluation { param: String },

    #[error("zero-norm vector at example {index} ({what})")]
    Singularity { index: usize, what: &'static str },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
