use thiserror::Error;

/// Failure of a command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] vrdiff::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for bad configuration or inputs, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use vrdiff::Error as E;
        match self {
            CliError::Config(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Checkpoint(_)
                | E::Parse { .. }
                | E::Format { .. }
                | E::Embedding { .. }
                | E::MissingResidues(_)
                | E::UnknownResidue(_)
                | E::UnknownAtomType(_)
                | E::InvalidArgument(_) => 1,
                _ => 2,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
