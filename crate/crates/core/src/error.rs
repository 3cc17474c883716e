use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate softmax slice: every entry of row {row} is masked")]
    DegenerateSlice { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("placement error: could not place {class} after {tries} tries")]
    Placement { class: String, tries: usize },

    #[error("parse error in {what} at {location}: {msg}")]
    Parse {
        what: String,
        location: String,
        msg: String,
    },

    #[error("checkpoint: bad magic {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint: unknown parameter {0:?}")]
    CheckpointUnknownParam(String),

    #[error("checkpoint: parameter {name:?} has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: parameter {0:?} missing from file")]
    CheckpointMissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
