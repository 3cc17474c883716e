use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] pdtr_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use pdtr_core::Error as E;
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Verification(_) => EXIT_VERIFICATION,
            Self::Core(e) => match e {
                E::Config(_) => EXIT_USAGE,
                E::Numeric(_) | E::DegenerateSlice { .. } | E::Dimension(_) => EXIT_NUMERIC,
                E::Input(_)
                | E::Placement { .. }
                | E::Parse { .. }
                | E::Io(_)
                | E::CheckpointMagic(_)
                | E::CheckpointVersion(_)
                | E::CheckpointTruncated(_)
                | E::CheckpointUnknownParam(_)
                | E::CheckpointShape { .. }
                | E::CheckpointMissingParam(_) => EXIT_DATA,
            },
        }
    }
}
