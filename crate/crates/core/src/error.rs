use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing annotation for audio file {0}")]
    MissingAnnotation(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("recording {0} is absent from the split listing")]
    MissingSplit(String),

    #[error("audio error on {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("empty cycle {0}")]
    EmptyCycle(String),

    #[error("signal shorter than window ({len} < {win})")]
    SignalTooShort { len: usize, win: usize },

    #[error("invalid mel parameters: {0}")]
    MelParams(String),

    #[error("input has {frames} frames but the encoder needs at least {required}")]
    InputTooShort { frames: usize, required: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward called without a preceding forward pass in {0}")]
    NoForward(&'static str),

    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("degenerate batch: single label")]
    DegenerateBatch,

    #[error("missing metadata labels for head {head} at views {views:?}")]
    MissingLabels { head: usize, views: Vec<usize> },

    #[error("degenerate test set: {0}")]
    DegenerateTestSet(&'static str),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint fingerprint {found} does not match model fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint tensor shape mismatch for: {}", .0.join(", "))]
    CheckpointShapes(Vec<String>),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}; batch origins {origins:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        origins: Vec<String>,
    },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
