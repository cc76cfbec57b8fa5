use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of the arguments do not agree with each other.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Caller-supplied values are invalid (non-finite entries, labels out of range, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A factorization failed or a density evaluated to NaN.
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("component {component} has expected size {mass:.3}, below the minimum {min}")]
    EmptyComponent {
        component: usize,
        mass: f64,
        min: f64,
    },

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("model selection failed: every grid cell failed ({0})")]
    Selection(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
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

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
