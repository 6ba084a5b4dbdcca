use cloq_core::ErrorCategory;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: cloq_core::Error,
    },
    #[error(transparent)]
    Core(#[from] cloq_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let category = match self {
            CliError::Config(_) | CliError::Parse { .. } => ErrorCategory::Config,
            CliError::Layer { source, .. } | CliError::Core(source) => source.category(),
        };
        match category {
            ErrorCategory::Config => EXIT_CONFIG,
            ErrorCategory::Data => EXIT_DATA,
            ErrorCategory::Numerical => EXIT_NUMERICAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
