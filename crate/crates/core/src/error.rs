use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unregistered primitive `{0}`")]
    UnregisteredPrimitive(String),

    /// A forward computation produced NaN.
    #[error("tainted value: node {node} ({op}) produced NaN")]
    Tainted { node: usize, op: &'static str },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {message}", path.display())]
    Load { path: PathBuf, message: String },

    #[error("task {task}: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn in_task(self, task: &str) -> Self {
        Error::Task {
            task: task.to_string(),
            source: Box::new(self),
        }
    }

    pub fn in_epoch(self, epoch: usize) -> Self {
        Error::Epoch {
            epoch,
            source: Box::new(self),
        }
    }
}
