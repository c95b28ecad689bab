use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage-order error: {0}")]
    StageOrder(String),

    #[error(transparent)]
    Core(#[from] fdg_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 2 configuration, 3 stage order, 4 numerical failure, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::StageOrder(_) => 3,
            CliError::Core(e) => match e {
                fdg_core::Error::Configuration(_) | fdg_core::Error::Parameter(_) => 2,
                fdg_core::Error::NonFinite(_) => 4,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
