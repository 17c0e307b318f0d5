use std::path::PathBuf;

use crate::metrics::AssignmentPlan;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("point sets differ in size: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("exact assignment limited to {max} points, got {n}")]
    TooLarge { n: usize, max: usize },

    #[error("auction did not converge within {iterations} bidding rounds")]
    NotConverged {
        iterations: usize,
        best: Option<Box<AssignmentPlan>>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss became non-finite at batch {batch} of epoch {epoch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by caller input (bad files, arguments, shapes)
    /// rather than internal failures.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::NanLoss { .. })
    }
}
