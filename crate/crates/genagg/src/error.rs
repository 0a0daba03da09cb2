use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("container version {found} is newer than the supported version {supported}")]
    VersionAhead { found: u32, supported: u32 },

    #[error("round {round}: {source}")]
    Round { round: usize, source: genagg_core::Error },

    #[error(transparent)]
    Core(#[from] genagg_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 for usage, config and IO problems, 3 for
    /// numeric aborts.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            Error::Round { source, .. } | Error::Core(source) => source,
            _ => return 2,
        };
        match core {
            genagg_core::Error::NonFinite { .. }
            | genagg_core::Error::NonFiniteStep { .. }
            | genagg_core::Error::ClientDiverged { .. }
            | genagg_core::Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
