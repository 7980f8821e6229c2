use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] locrate::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 IO, 4 corrupt input, 5 infeasible,
    /// 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use locrate::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::InvalidArgument(_)
                | E::Domain(_)
                | E::InsufficientSamples { .. }
                | E::PaddingInsufficient { .. } => 2,
                E::Io(_) => 3,
                E::Corrupt(_) => 4,
                E::Infeasible { .. } | E::NoFeasibleBackoff { .. } => 5,
                _ => 1,
            },
        }
    }
}
