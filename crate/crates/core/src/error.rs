use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Each variant names what went wrong in
/// terms of the domain, so callers can attribute it to a pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phantom does not fit the grid: {0}")]
    Sizing(String),

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("frame number {n} outside {min}..={max}")]
    FrameNumber { n: usize, min: usize, max: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
