use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate batch: every target position is masked")]
    DegenerateBatch,

    #[error("backward called on a spent tape; run a new forward pass first")]
    StaleTape,

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("trainable tensor `{0}` has no gradient for this step")]
    MissingGrad(String),

    #[error("tensor `{0}` is shape-only and cannot be evaluated")]
    MetaTensor(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid tuning plan: {0}")]
    Plan(String),

    #[error("{kind} adapter already attached to {component}")]
    DoubleAttach {
        kind: &'static str,
        component: String,
    },

    #[error("checkpoint config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },

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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
