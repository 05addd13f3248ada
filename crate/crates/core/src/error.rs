use std::path::PathBuf;

/// Errors produced by the nerfslam pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input outside the domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A backward pass was handed state recorded by a different forward pass.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate alignment: {0}")]
    Alignment(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("trajectory generation left free space: {0}")]
    Generation(String),

    #[error("no valid pixels to evaluate")]
    NoValidPixels,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
