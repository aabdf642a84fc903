use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("empty track: character {character_id} has no frames")]
    EmptyTrack { character_id: u32 },

    #[error("duplicate character id {0}")]
    DuplicateIdentity(u32),

    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: u64, loss: f64 },

    #[error("sampling diverged at step {step}")]
    DivergedSampling { step: usize },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incomplete checkpoint: missing array `{0}`")]
    IncompleteCheckpoint(String),

    #[error("incomplete input: missing {}", .0.join(", "))]
    IncompleteInput(Vec<String>),

    #[error("corrupt clip file: {0}")]
    CorruptClip(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
