use thiserror::Error;

/// Top-level error type. Variants group into the CLI's exit-code classes:
/// config (2), data (3), numeric failure (4); anything else exits 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported schema version {found} (this build reads version {supported})")]
    Version { found: u64, supported: u64 },

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Num(#[from] numcore::NumError),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Version { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Generation(_) | Error::Sampling(_) => 1,
            Error::Num(e) => match e {
                numcore::NumError::OptimConfig(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
